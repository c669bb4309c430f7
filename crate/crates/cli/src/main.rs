use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lytnet::evaluation::{self, EvalRecord, ReportFormat};
use lytnet::geometry::{direction_angle, Homography, Point};
use lytnet::guidance::{self, GuidanceConfig};
use lytnet::network::{build_lytnet, NetworkConfig, Parameters};
use lytnet::training::synth::SceneGenerator;
use lytnet::training::{
    self, load_frames, load_image, load_weights, predict, save_weights, write_dataset, EarlyStop, LabeledFrame,
    LrSchedule, TrainConfig,
};
use lytnet::{Error, LightClass, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lytnet", version, about = "Pedestrian light and zebra-crossing network tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Train from a manifest, writing weights and a JSONL metrics log.
    Train(TrainArgs),
    /// Run the network over images, one JSON line per image.
    Infer(InferArgs),
    /// Evaluate a manifest with weights, or a JSONL file of records.
    Eval(EvalArgs),
    /// Stream JSONL frames through the five-frame guidance logic.
    GuideReplay(ReplayArgs),
    /// Map pixel points through the homography.
    Transform(TransformArgs),
    /// Report cost and throughput across width multipliers.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct NetArgs {
    /// Width multiplier.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Network input as HEIGHTxWIDTH, each a multiple of 64.
    #[arg(long, value_parser = parse_size, default_value = "576x768")]
    input_size: (usize, usize),
}

impl NetArgs {
    fn config(&self) -> NetworkConfig {
        NetworkConfig::default()
            .with_width(self.alpha)
            .with_input(self.input_size.0, self.input_size.1)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, value_parser = parse_size, default_value = "128x128")]
    size: (usize, usize),
    /// Share of frames drawn without a crossing.
    #[arg(long, default_value_t = 0.0)]
    no_crossing_rate: f64,
    /// Output directory; receives images/ and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Weights file to write.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log; defaults to the weights path with a .metrics.jsonl suffix.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 800)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    omega: f64,
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    /// Disable random crops and flips.
    #[arg(long)]
    no_augment: bool,
    /// Hold out this fold (of 5) for validation.
    #[arg(long)]
    validation_fold: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop once the epoch loss is below this and accuracy is 1.
    #[arg(long)]
    stop_below: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    net: NetArgs,
    /// Write JSONL here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSONL evaluation records.
    #[arg(long, conflicts_with_all = ["manifest", "weights"])]
    records: Option<PathBuf>,
    #[arg(long, requires = "weights")]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    weights: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value = "text")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-frame records used for the report.
    #[arg(long)]
    records_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// JSONL frames: {"probs":[...5], "x1":..,"y1":..,"x2":..,"y2":..}.
    input: PathBuf,
    /// Text file with 9 numbers, row-major.
    #[arg(long)]
    homography: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    /// Points as x,y in pixels.
    #[arg(required = true, allow_hyphen_values = true)]
    points: Vec<String>,
    #[arg(long)]
    homography: Option<PathBuf>,
    /// Map from the bird's-eye frame back to the image.
    #[arg(long)]
    inverse: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated width multipliers.
    #[arg(long, value_delimiter = ',', default_values_t = lytnet::bench::WIDTHS)]
    widths: Vec<f64>,
    #[arg(long, value_parser = parse_size, default_value = "576x768")]
    input_size: (usize, usize),
    /// Timed runs per width; the fastest is reported.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "text")]
    format: String,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(h)?, n(w)?))
}

fn parse_point(s: &str) -> Result<Point> {
    let bad = || Error::InvalidArgument(format!("expected x,y, got {s:?}"));
    let (x, y) = s.split_once(',').ok_or_else(bad)?;
    Ok((x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })
        }
    }
}

fn load_homography(path: Option<&Path>) -> Result<Homography> {
    path.map_or_else(|| Ok(Homography::default()), Homography::read)
}

fn load_network(weights: &Path, net: &NetArgs) -> Result<(lytnet::network::Network, Parameters<f32>)> {
    let (network, mut params) = build_lytnet::<f32>(net.config(), 0)?;
    load_weights(&mut params, weights)?;
    Ok((network, params))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut g = SceneGenerator::new(a.size.0, a.size.1);
    g.no_crossing_rate = a.no_crossing_rate;
    let frames = g.generate_set(a.count, a.seed);
    let manifest = write_dataset(&a.out, &frames)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        network: a.net.config(),
        omega: a.omega,
        lambda: a.lambda,
        schedule: LrSchedule {
            initial: a.lr,
            ..LrSchedule::default()
        },
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        validation_fold: a.validation_fold,
        augment: !a.no_augment,
        flip: !a.no_augment,
        checkpoint_every: a.checkpoint_every,
        checkpoint_path: a.checkpoint_every.map(|_| a.out.clone()),
        early_stop: a.stop_below.map(|max_loss| EarlyStop {
            max_loss,
            min_accuracy: 1.0,
        }),
        ..TrainConfig::default()
    };
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("metrics.jsonl"));
    let io_err = |e| Error::Io {
        path: log_path.clone(),
        source: e,
    };
    let mut log = fs::File::create(&log_path).map_err(io_err)?;
    let mut write_err = None;
    let outcome = training::train_manifest(&a.manifest, &cfg, &mut |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    save_weights(&outcome.params, &a.out)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epochs {} loss {:.6} accuracy {:.4}",
            outcome.log.len(),
            last.loss,
            last.accuracy
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct InferLine<'a> {
    path: &'a str,
    class: LightClass,
    probs: [f64; 5],
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

fn infer(a: InferArgs) -> Result<()> {
    let (network, params) = load_network(&a.weights, &a.net)?;
    let mut text = String::new();
    for path in &a.images {
        let frame = LabeledFrame {
            image: load_image(path, Some(a.net.input_size))?,
            class: LightClass::None,
            endpoints: None,
            obstructed: false,
        };
        let p = predict(&network, &params, &[&frame], 1)?.remove(0);
        let e = p.endpoints;
        let line = InferLine {
            path: &path.to_string_lossy(),
            class: p.class(),
            probs: p.probs,
            x1: e.x1,
            y1: e.y1,
            x2: e.x2,
            y2: e.y2,
        };
        text.push_str(&serde_json::to_string(&line).expect("line serializes"));
        text.push('\n');
    }
    write_output(a.out.as_deref(), &text)
}

fn eval(a: EvalArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let records = match (&a.records, &a.manifest, &a.weights) {
        (Some(r), _, _) => evaluation::read_records(r)?,
        (None, Some(m), Some(w)) => {
            let (network, params) = load_network(w, &a.net)?;
            let frames = load_frames(m, Some(a.net.input_size))?;
            let refs: Vec<&LabeledFrame> = frames.iter().collect();
            let preds = predict(&network, &params, &refs, 8)?;
            frames
                .iter()
                .zip(preds)
                .map(|(f, p)| EvalRecord {
                    predicted: p.class(),
                    actual: f.class,
                    predicted_endpoints: p.endpoints,
                    actual_endpoints: f.endpoints,
                    obstructed: f.obstructed,
                })
                .collect()
        }
        _ => return Err(Error::InvalidArgument("eval needs --records or --manifest with --weights".into())),
    };
    if let Some(p) = &a.records_out {
        write_output(Some(p), &evaluation::records_to_jsonl(&records))?;
    }
    let report = evaluation::report(&records)?;
    let mut text = report.render(format);
    if !text.ends_with('\n') {
        text.push('\n');
    }
    write_output(a.out.as_deref(), &text)
}

fn guide_replay(a: ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).map_err(|e| Error::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let frames = guidance::parse_replay(&text)?;
    let config = GuidanceConfig {
        homography: load_homography(a.homography.as_deref())?,
        ..GuidanceConfig::default()
    };
    let outputs = guidance::replay(&frames, config)?;
    write_output(a.out.as_deref(), &guidance::outputs_to_jsonl(&outputs))
}

fn transform(a: TransformArgs) -> Result<()> {
    let mut h = load_homography(a.homography.as_deref())?;
    if a.inverse {
        h = h.inverse()?;
    }
    let mapped = a
        .points
        .iter()
        .map(|s| h.apply(parse_point(s)?))
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for (x, y) in &mapped {
        text.push_str(&format!("{x:.3},{y:.3}\n"));
    }
    if let [start, end, ..] = mapped[..] {
        text.push_str(&format!("dtheta {:.3}\n", direction_angle(start, end)?));
    }
    write_output(None, &text)
}

fn bench(a: BenchArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let rows = lytnet::bench::measure(&a.widths, a.input_size, a.runs, a.seed)?;
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n",
        ReportFormat::Text => {
            let mut s = format!("{:>8} {:>16} {:>12}\n", "alpha", "flops", "images/s");
            for r in &rows {
                s.push_str(&format!("{:>8} {:>16} {:>12.3}\n", r.alpha, r.flops, r.images_per_second));
            }
            s
        }
    };
    write_output(None, &text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::GuideReplay(a) => guide_replay(a),
        Command::Transform(a) => transform(a),
        Command::Bench(a) => bench(a),
    }
}

/// I/O failures exit with 2, everything else with 1.
fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LYTNET_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
