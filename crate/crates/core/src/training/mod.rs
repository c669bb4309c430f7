//! Data pipeline, composite loss and the Adam training loop.

mod data;
mod loss;
mod optim;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{argmax, LightClass};
use crate::error::{Error, Result};
use crate::network::{build_lytnet, weights, Mode, Network, NetworkConfig, Parameters};
use crate::tensor::{kernels, Graph, Real, Tensor, Var};

pub use data::{
    apply_augment, augment, kfold_split, load_frames, load_image, manifest_to_string, parse_manifest, read_manifest,
    resize_image, save_image, write_dataset, AugmentConfig, AugmentParams, Endpoints, Fold, LabeledFrame,
    ManifestRecord,
};
pub use loss::{check_weights, combine_terms, loss, record_loss, regression_targets, LossTerms, LossVars};
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState, LrSchedule};

/// Pixel normalization applied before the network: `(x − 0.5) / 0.25`.
pub fn to_network_input<T: Real>(frames: &[&LabeledFrame]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = frames
        .iter()
        .map(|f| f.image.map(|v| (v - 0.5) * 4.0).cast())
        .collect();
    Tensor::stack(&items)
}

/// Ratio between the pre-crop load size and the crop (876 / 768 = 657 / 576).
pub const PRECROP_RATIO: f64 = 876.0 / 768.0;

/// Stop once an epoch reaches both bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub max_loss: f64,
    pub min_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    /// Weight of the regression term.
    pub omega: f64,
    /// L2 coefficient.
    pub lambda: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    /// Hold out this fold for validation; train on everything when `None`.
    pub validation_fold: Option<usize>,
    /// Random crop to the network input plus flip; frames are loaded at
    /// `PRECROP_RATIO` times the input size when enabled.
    pub augment: bool,
    pub flip: bool,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            omega: 0.5,
            lambda: 1e-5,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            batch_size: 8,
            epochs: 800,
            seed: 0,
            folds: 5,
            validation_fold: None,
            augment: true,
            flip: true,
            checkpoint_every: None,
            checkpoint_path: None,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn input_size(&self) -> (usize, usize) {
        (self.network.input_height, self.network.input_width)
    }

    /// Size frames are resized to when loaded from disk.
    pub fn load_size(&self) -> (usize, usize) {
        let (h, w) = self.input_size();
        if self.augment {
            let s = |v: usize| (v as f64 * PRECROP_RATIO).round() as usize;
            (s(h), s(w))
        } else {
            (h, w)
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_weights(self.omega, self.lambda)?;
        self.network.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if let Some(f) = self.validation_fold {
            if f >= self.folds {
                return Err(Error::invalid(format!("validation fold {f} out of range for {} folds", self.folds)));
            }
        }
        if self.checkpoint_every.is_some() && self.checkpoint_path.is_none() {
            return Err(Error::invalid("checkpoint interval given without a checkpoint path"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub ce: f64,
    pub reg: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub params: Parameters<f32>,
    pub log: Vec<EpochMetrics>,
}

/// One optimizer step on a batch. Returns the loss terms and the number of
/// correct argmax predictions, both measured before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    network: &Network,
    params: &mut Parameters<T>,
    state: &mut AdamState<T>,
    frames: &[&LabeledFrame],
    omega: f64,
    lambda: f64,
    lr: f64,
    adam: &AdamConfig,
) -> Result<(LossTerms, usize)> {
    let mut graph = Graph::<T>::new();
    let bound = network.bind(&mut graph, params, true);
    let input = graph.constant(to_network_input(frames)?);
    let out = network.forward_graph(&mut graph, &bound, params, input, Mode::Train)?;
    let regularized: Vec<Var> = bound
        .learnable()
        .filter(|&(i, _)| params.entry(i).kind.is_regularized())
        .map(|(_, v)| v)
        .collect();
    let labels: Vec<_> = frames.iter().map(|f| (f.class, f.endpoints)).collect();
    let vars = record_loss(&mut graph, out.logits, out.endpoints, &labels, &regularized, omega, lambda)?;
    let correct = count_correct(graph.value(out.logits), frames);
    graph.backward(vars.total)?;
    let terms = vars.terms(&graph);
    let grads: Vec<(usize, Vec<T>)> = bound
        .learnable()
        .map(|(i, v)| (i, graph.take_grad(v).unwrap_or_else(|| vec![T::zero(); params.tensor(i).len()])))
        .collect();
    adam_step(params, &grads, state, lr, adam)?;
    Ok((terms, correct))
}

fn count_correct<T: Real>(logits: &Tensor<T>, frames: &[&LabeledFrame]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(frames)
        .filter(|(row, f)| argmax(row) == f.class.index())
        .count()
}

/// Network output for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Softmax probabilities in class order.
    pub probs: [f64; 5],
    pub endpoints: Endpoints,
}

impl Prediction {
    pub fn class(&self) -> LightClass {
        LightClass::from_index(argmax(&self.probs)).expect("five classes")
    }
}

/// Inference over frames in chunks of `batch_size`, preserving order.
pub fn predict(
    network: &Network,
    params: &Parameters<f32>,
    frames: &[&LabeledFrame],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch_size.max(1)) {
        let (logits, endpoints) = network.forward(params, &to_network_input::<f32>(chunk)?)?;
        let probs = kernels::softmax_forward(&logits.cast::<f64>())?;
        let k = probs.shape()[1];
        for (p, e) in probs.data().chunks_exact(k).zip(endpoints.data().chunks_exact(4)) {
            let mut arr = [0.0; 5];
            arr.copy_from_slice(&p[..5]);
            let e: Vec<f64> = e.iter().map(|&v| v as f64).collect();
            out.push(Prediction {
                probs: arr,
                endpoints: Endpoints::from_slice(&e),
            });
        }
    }
    Ok(out)
}

/// Trains from scratch on in-memory frames. `on_epoch` sees every epoch's
/// metrics as soon as they are computed.
pub fn train(
    frames: &[LabeledFrame],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::invalid("no training frames"));
    }
    let (network, mut params) = build_lytnet::<f32>(cfg.network.clone(), cfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);

    let (train_idx, val_idx) = match cfg.validation_fold {
        Some(f) => {
            let fold = kfold_split(frames.len(), cfg.folds, cfg.seed)?.swap_remove(f);
            (fold.train, fold.validation)
        }
        None => ((0..frames.len()).collect(), Vec::new()),
    };
    let (ih, iw) = cfg.input_size();
    let validation: Vec<LabeledFrame> = val_idx
        .iter()
        .map(|&i| {
            let f = &frames[i];
            Ok(LabeledFrame {
                image: resize_image(&f.image, ih, iw)?,
                ..f.clone()
            })
        })
        .collect::<Result<_>>()?;
    let crop = AugmentConfig {
        crop_height: ih,
        crop_width: iw,
        flip: cfg.flip,
    };

    let mut log = Vec::new();
    let mut order = train_idx;
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.rate(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<LabeledFrame>;
            let batch: Vec<&LabeledFrame> = if cfg.augment {
                owned = chunk
                    .iter()
                    .map(|&i| augment(&frames[i], &crop, &mut rng))
                    .collect::<Result<_>>()?;
                owned.iter().collect()
            } else {
                chunk.iter().map(|&i| &frames[i]).collect()
            };
            let (terms, ok) = train_step(&network, &mut params, &mut state, &batch, cfg.omega, cfg.lambda, lr, &cfg.adam)?;
            let n = batch.len() as f64;
            sums[0] += terms.total * n;
            sums[1] += terms.mse * n;
            sums[2] += terms.ce * n;
            sums[3] += terms.reg * n;
            correct += ok;
        }
        let n = order.len() as f64;
        let mut m = EpochMetrics {
            epoch,
            lr,
            loss: sums[0] / n,
            mse: sums[1] / n,
            ce: sums[2] / n,
            reg: sums[3] / n,
            accuracy: correct as f64 / n,
            validation_loss: None,
            validation_accuracy: None,
        };
        if !validation.is_empty() {
            let refs: Vec<&LabeledFrame> = validation.iter().collect();
            let preds = predict(&network, &params, &refs, cfg.batch_size)?;
            let hits = preds.iter().zip(&refs).filter(|(p, f)| p.class() == f.class).count();
            m.validation_accuracy = Some(hits as f64 / refs.len() as f64);
            let mut total = 0.0;
            for chunk in refs.chunks(cfg.batch_size) {
                let (logits, endpoints) = network.forward(&params, &to_network_input::<f32>(chunk)?)?;
                total += loss(&logits, &endpoints, chunk, cfg.omega, cfg.lambda, &params)?.total * chunk.len() as f64;
            }
            m.validation_loss = Some(total / refs.len() as f64);
        }
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &cfg.checkpoint_path) {
            if every > 0 && (epoch + 1) % every == 0 {
                save_weights(&params, path)?;
            }
        }
        log::info!(
            "epoch {epoch}: lr {lr:e} loss {:.5} acc {:.4}",
            m.loss,
            m.accuracy
        );
        on_epoch(&m);
        let stop = cfg
            .early_stop
            .is_some_and(|s| m.loss < s.max_loss && m.accuracy >= s.min_accuracy);
        log.push(m);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome { network, params, log })
}

/// Loads a manifest at [`TrainConfig::load_size`] and trains on it.
pub fn train_manifest(
    manifest: &Path,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let frames = load_frames(manifest, Some(cfg.load_size()))?;
    train(&frames, cfg, on_epoch)
}

pub fn save_weights(params: &Parameters<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, weights::encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(params: &mut Parameters<f32>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    weights::load_into(params, &bytes)
}
