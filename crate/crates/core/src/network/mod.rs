//! The LYTNet stack: a strided 3×3 stem, a 2×2 max-pool, inverted-residual
//! bottleneck groups, a 1×1 widening convolution, global average pooling and
//! two fully connected heads (light-mode logits and midline endpoints) that
//! share the pooled feature.

mod params;
pub mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_cost, BatchNormMode, ConvDescriptor, ConvMode, Graph, Real, Tensor, Var};

pub use params::{ParamEntry, ParamKind, Parameters};

/// Spatial downsampling from input to the pooled feature map.
pub const DOWNSAMPLE: usize = 64;

/// Class order of the logits head.
pub const CLASS_NAMES: [&str; 5] = ["red", "green", "countdown_green", "countdown_blank", "none"];

/// One row of the bottleneck table: expansion `t`, output channels `c`,
/// repeats `n`, stride `s` of the first repeat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

impl BottleneckSpec {
    pub const fn new(expansion: usize, out_channels: usize, repeats: usize, stride: usize) -> Self {
        Self {
            expansion,
            out_channels,
            repeats,
            stride,
        }
    }
}

/// The bottleneck table. The 160-channel group's first block strides by 2,
/// which is what takes 24×18 down to the 12×9 the following rows expect.
pub const BOTTLENECKS: [BottleneckSpec; 9] = [
    BottleneckSpec::new(1, 16, 1, 1),
    BottleneckSpec::new(6, 24, 1, 2),
    BottleneckSpec::new(6, 24, 2, 1),
    BottleneckSpec::new(6, 32, 1, 2),
    BottleneckSpec::new(6, 64, 1, 2),
    BottleneckSpec::new(6, 64, 2, 1),
    BottleneckSpec::new(6, 96, 1, 1),
    BottleneckSpec::new(6, 160, 2, 2),
    BottleneckSpec::new(6, 320, 1, 1),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub width_multiplier: f64,
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub bottlenecks: Vec<BottleneckSpec>,
    pub last_channels: usize,
    pub class_hidden: usize,
    pub regression_hidden: usize,
    pub classes: usize,
    pub endpoint_outputs: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            input_height: 576,
            input_width: 768,
            stem_channels: 32,
            bottlenecks: BOTTLENECKS.to_vec(),
            last_channels: 1280,
            class_hidden: 160,
            regression_hidden: 80,
            classes: 5,
            endpoint_outputs: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_height = height;
        self.input_width = width;
        self
    }

    pub fn with_width(mut self, alpha: f64) -> Self {
        self.width_multiplier = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let alpha = self.width_multiplier;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("width multiplier must be positive, got {alpha}")));
        }
        for (name, v) in [("height", self.input_height), ("width", self.input_width)] {
            if v == 0 || v % DOWNSAMPLE != 0 {
                return Err(Error::invalid(format!(
                    "input {name} {v} is not a positive multiple of {DOWNSAMPLE}"
                )));
            }
        }
        let channels = [self.stem_channels, self.last_channels, self.class_hidden, self.regression_hidden];
        if channels
            .into_iter()
            .chain(self.bottlenecks.iter().map(|b| b.out_channels))
            .any(|c| c < 8)
        {
            return Err(Error::invalid("every scaled channel count must start at 8 or more"));
        }
        if self
            .bottlenecks
            .iter()
            .any(|b| b.expansion == 0 || b.repeats == 0 || !(1..=2).contains(&b.stride))
        {
            return Err(Error::invalid("bottleneck rows need t, n > 0 and stride 1 or 2"));
        }
        if self.classes == 0 || self.endpoint_outputs == 0 {
            return Err(Error::invalid("head output sizes must be positive"));
        }
        Ok(())
    }

    fn scaled(&self, c: usize) -> usize {
        apply_width_multiplier(c, self.width_multiplier)
    }
}

/// `round(c·α)` snapped to the nearest multiple of 8 (ties go up), never
/// below 8.
pub fn apply_width_multiplier(channels: usize, alpha: f64) -> usize {
    let rounded = (channels as f64 * alpha).round() as usize;
    let snapped = (rounded + 4) / 8 * 8;
    snapped.max(8)
}

#[derive(Clone, Copy, Debug)]
struct BatchNormIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    desc: ConvDescriptor,
    weight: usize,
    bn: BatchNormIdx,
    relu6: bool,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    group: usize,
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    project: ConvBn,
    residual: bool,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
    relu6: bool,
}

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer analytic cost, `macs` for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    /// `None` for fully connected layers.
    pub mode: Option<ConvMode>,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub macs: u64,
}

/// Vars produced by [`Network::forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub endpoints: Var,
    /// Pooled feature read by both heads.
    pub pooled: Var,
    /// `(stage, activation shape)` at the input of every table row.
    pub trace: Vec<(String, Vec<usize>)>,
}

/// Graph leaves bound to the learnable entries of [`Parameters`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Option<Var> {
        self.vars[index]
    }

    /// `(parameter index, var)` for every bound learnable parameter.
    pub fn learnable(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    /// Binds existing leaves, given as `(parameter index, var)`, to every
    /// learnable parameter.
    pub fn from_leaves<T: Real>(params: &Parameters<T>, leaves: &[(usize, Var)]) -> Result<Self> {
        let mut vars = vec![None; params.len()];
        for &(i, v) in leaves {
            if i >= params.len() || !params.entry(i).kind.is_learnable() {
                return Err(Error::invalid(format!("parameter {i} is not learnable")));
            }
            vars[i] = Some(v);
        }
        if let Some(missing) = (0..params.len()).find(|&i| params.entry(i).kind.is_learnable() && vars[i].is_none()) {
            return Err(Error::invalid(format!("parameter {} is unbound", params.entry(missing).name)));
        }
        Ok(Self { vars })
    }

    fn get(&self, index: usize) -> Var {
        self.vars[index].expect("learnable parameter is bound")
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
    head: ConvBn,
    classifier: [Dense; 2],
    regressor: [Dense; 2],
}

struct Builder<'a, T: Real> {
    params: Parameters<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv_bn(&mut self, name: &str, desc: ConvDescriptor, relu6: bool) -> ConvBn {
        let bound = 1.0 / (desc.fan_in() as f64).sqrt();
        let weight = self.params.push(
            format!("{name}.conv.weight"),
            ParamKind::Weight,
            Tensor::uniform(desc.weight_shape(), bound, self.rng),
        );
        let c = desc.out_channels;
        let bn = BatchNormIdx {
            gamma: self
                .params
                .push(format!("{name}.bn.gamma"), ParamKind::Scale, Tensor::full([c], T::one())),
            beta: self
                .params
                .push(format!("{name}.bn.beta"), ParamKind::Shift, Tensor::zeros([c])),
            mean: self
                .params
                .push(format!("{name}.bn.running_mean"), ParamKind::RunningMean, Tensor::zeros([c])),
            var: self.params.push(
                format!("{name}.bn.running_var"),
                ParamKind::RunningVar,
                Tensor::full([c], T::one()),
            ),
        };
        ConvBn {
            desc,
            weight,
            bn,
            relu6,
        }
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, relu6: bool) -> Dense {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            weight: self.params.push(
                format!("{name}.weight"),
                ParamKind::Weight,
                Tensor::uniform([fan_out, fan_in], bound, self.rng),
            ),
            bias: self.params.push(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::uniform([fan_out], bound, self.rng),
            ),
            relu6,
        }
    }
}

/// Builds the network and its seeded initial parameters.
pub fn build_lytnet<T: Real>(config: NetworkConfig, seed: u64) -> Result<(Network, Parameters<T>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        params: Parameters::default(),
        rng: &mut rng,
    };
    let stem_c = config.scaled(config.stem_channels);
    let stem = b.conv_bn("stem", ConvDescriptor::standard(3, stem_c, 3, 2, 1), true);
    let mut blocks = Vec::new();
    let mut cin = stem_c;
    let mut index = 0;
    for (group, spec) in config.bottlenecks.iter().enumerate() {
        let cout = config.scaled(spec.out_channels);
        for r in 0..spec.repeats {
            let stride = if r == 0 { spec.stride } else { 1 };
            let hidden = cin * spec.expansion;
            let name = format!("blocks.{index}");
            let expand = (spec.expansion != 1)
                .then(|| b.conv_bn(&format!("{name}.expand"), ConvDescriptor::pointwise(cin, hidden), true));
            let depthwise = b.conv_bn(
                &format!("{name}.depthwise"),
                ConvDescriptor::depthwise(hidden, 3, stride, 1),
                true,
            );
            let project = b.conv_bn(&format!("{name}.project"), ConvDescriptor::pointwise(hidden, cout), false);
            blocks.push(Bottleneck {
                group,
                expand,
                depthwise,
                project,
                residual: stride == 1 && cin == cout,
            });
            cin = cout;
            index += 1;
        }
    }
    let last = config.scaled(config.last_channels);
    let head = b.conv_bn("head", ConvDescriptor::pointwise(cin, last), true);
    let ch = config.scaled(config.class_hidden);
    let rh = config.scaled(config.regression_hidden);
    let classifier = [
        b.dense("classifier.fc1", last, ch, true),
        b.dense("classifier.fc2", ch, config.classes, false),
    ];
    let regressor = [
        b.dense("regressor.fc1", last, rh, true),
        b.dense("regressor.fc2", rh, config.endpoint_outputs, false),
    ];
    let params = b.params;
    Ok((
        Network {
            config,
            stem,
            blocks,
            head,
            classifier,
            regressor,
        },
        params,
    ))
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Number of bottleneck blocks (sum of repeats).
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Number of bottleneck table rows.
    pub fn group_count(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.group + 1)
    }

    /// `(expansion conv present, in channels, out channels, stride, residual)` per block.
    pub fn block_summary(&self) -> Vec<(bool, usize, usize, usize, bool)> {
        self.blocks
            .iter()
            .map(|b| {
                let cin = b.expand.map_or(b.depthwise.desc.in_channels, |e| e.desc.in_channels);
                (
                    b.expand.is_some(),
                    cin,
                    b.project.desc.out_channels,
                    b.depthwise.desc.stride,
                    b.residual,
                )
            })
            .collect()
    }

    /// Adds a leaf per learnable parameter: variables when `trainable`,
    /// constants otherwise.
    pub fn bind<T: Real>(&self, graph: &mut Graph<T>, params: &Parameters<T>, trainable: bool) -> Bound {
        let vars = params
            .entries()
            .iter()
            .map(|e| {
                e.kind.is_learnable().then(|| {
                    if trainable {
                        graph.variable(e.tensor.clone())
                    } else {
                        graph.constant(e.tensor.clone())
                    }
                })
            })
            .collect();
        Bound { vars }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 4
            && shape[0] > 0
            && shape[1] == 3
            && shape[2].is_multiple_of(DOWNSAMPLE)
            && shape[3].is_multiple_of(DOWNSAMPLE);
        if !ok {
            return Err(Error::ShapeMismatch {
                context: "network input (N, 3, H, W) with H and W multiples of 64",
                expected: vec![1, 3, self.config.input_height, self.config.input_width],
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn conv_bn<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        params: &mut Parameters<T>,
        layer: &ConvBn,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let y = g.conv2d(x, bound.get(layer.weight), layer.desc)?;
        let eps = T::of(self.config.bn_eps);
        let (gamma, beta) = (bound.get(layer.bn.gamma), bound.get(layer.bn.beta));
        let y = match mode {
            Mode::Eval => {
                let mean = params.tensor(layer.bn.mean).data();
                let var = params.tensor(layer.bn.var).data();
                g.batch_norm(y, gamma, beta, BatchNormMode::Eval { mean, var }, eps)?.0
            }
            Mode::Train => {
                let (y, stats) = g.batch_norm(y, gamma, beta, BatchNormMode::Train, eps)?;
                let stats = stats.expect("training batch norm reports statistics");
                let m = T::of(self.config.bn_momentum);
                let keep = T::one() - m;
                let unbias = if stats.count > 1 {
                    T::of(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                for (r, &s) in params.tensor_mut(layer.bn.mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * s;
                }
                for (r, &s) in params.tensor_mut(layer.bn.var).data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * s * unbias;
                }
                y
            }
        };
        Ok(if layer.relu6 { g.relu6(y) } else { y })
    }

    fn dense<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, layer: &Dense, x: Var) -> Result<Var> {
        let y = g.linear(x, bound.get(layer.weight), bound.get(layer.bias))?;
        Ok(if layer.relu6 { g.relu6(y) } else { y })
    }

    /// Records a forward pass on `graph`. In [`Mode::Train`] batch norm uses
    /// batch statistics and updates the running statistics in `params`.
    pub fn forward_graph<T: Real>(
        &self,
        graph: &mut Graph<T>,
        bound: &Bound,
        params: &mut Parameters<T>,
        input: Var,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        self.check_input(graph.value(input).shape())?;
        let mut trace = Vec::new();
        let mut record = |g: &Graph<T>, stage: String, v: Var| trace.push((stage, g.value(v).shape().to_vec()));
        record(graph, "conv2d 3x3".into(), input);
        let x = self.conv_bn(graph, bound, params, &self.stem, input, mode)?;
        record(graph, "maxpool 2x2".into(), x);
        let mut x = graph.max_pool(x, 2, 2)?;
        let mut last_group = usize::MAX;
        for block in &self.blocks {
            if block.group != last_group {
                record(graph, format!("bottleneck group {}", block.group), x);
                last_group = block.group;
            }
            let mut y = x;
            if let Some(expand) = &block.expand {
                y = self.conv_bn(graph, bound, params, expand, y, mode)?;
            }
            y = self.conv_bn(graph, bound, params, &block.depthwise, y, mode)?;
            y = self.conv_bn(graph, bound, params, &block.project, y, mode)?;
            x = if block.residual { graph.add(x, y)? } else { y };
        }
        record(graph, "conv2d 1x1".into(), x);
        let x = self.conv_bn(graph, bound, params, &self.head, x, mode)?;
        record(graph, "avgpool".into(), x);
        let pooled = graph.global_avg_pool(x)?;
        record(graph, "classifier fc1".into(), pooled);
        let h = self.dense(graph, bound, &self.classifier[0], pooled)?;
        record(graph, "classifier fc2".into(), h);
        let logits = self.dense(graph, bound, &self.classifier[1], h)?;
        record(graph, "regressor fc1".into(), pooled);
        let h = self.dense(graph, bound, &self.regressor[0], pooled)?;
        record(graph, "regressor fc2".into(), h);
        let endpoints = self.dense(graph, bound, &self.regressor[1], h)?;
        Ok(ForwardOutput {
            logits,
            endpoints,
            pooled,
            trace,
        })
    }

    /// Inference: `(logits (N, 5), endpoints (N, 4))` with running statistics.
    pub fn forward<T: Real>(&self, params: &Parameters<T>, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut graph = Graph::new();
        let mut params_view = params.clone();
        let bound = self.bind(&mut graph, params, false);
        let input = graph.constant(batch.clone());
        let out = self.forward_graph(&mut graph, &bound, &mut params_view, input, Mode::Eval)?;
        Ok((graph.value(out.logits).clone(), graph.value(out.endpoints).clone()))
    }

    /// Analytic per-layer multiply-accumulate counts for one image at the
    /// configured input size.
    pub fn layer_costs(&self) -> Vec<LayerCost> {
        let mut costs = Vec::new();
        let (mut h, mut w) = (self.config.input_height, self.config.input_width);
        let mut conv = |name: String, desc: &ConvDescriptor, h: &mut usize, w: &mut usize| {
            let (oh, ow) = desc.output_hw(*h, *w).expect("validated input size");
            let (k, ci, co) = (desc.kernel_size as u64, desc.in_channels as u64, desc.out_channels as u64);
            let c = conv_cost(oh as u64, ow as u64, k, ci, co);
            let macs = match desc.mode {
                // separable = depthwise (h·w·d·k²) + pointwise (h·w·d·d_j)
                ConvMode::Depthwise => c.separable - (oh * ow) as u64 * ci * co,
                _ => c.standard,
            };
            costs.push(LayerCost {
                name,
                mode: Some(desc.mode),
                out_h: oh,
                out_w: ow,
                kernel: desc.kernel_size,
                in_channels: desc.in_channels,
                out_channels: desc.out_channels,
                macs,
            });
            (*h, *w) = (oh, ow);
        };
        conv("stem".into(), &self.stem.desc, &mut h, &mut w);
        (h, w) = (h / 2, w / 2);
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(e) = &b.expand {
                conv(format!("blocks.{i}.expand"), &e.desc, &mut h, &mut w);
            }
            conv(format!("blocks.{i}.depthwise"), &b.depthwise.desc, &mut h, &mut w);
            conv(format!("blocks.{i}.project"), &b.project.desc, &mut h, &mut w);
        }
        conv("head".into(), &self.head.desc, &mut h, &mut w);
        let last = self.head.desc.out_channels;
        let ch = self.config.scaled(self.config.class_hidden);
        let rh = self.config.scaled(self.config.regression_hidden);
        for (name, fin, fout) in [
            ("classifier.fc1", last, ch),
            ("classifier.fc2", ch, self.config.classes),
            ("regressor.fc1", last, rh),
            ("regressor.fc2", rh, self.config.endpoint_outputs),
        ] {
            costs.push(LayerCost {
                name: name.into(),
                mode: None,
                out_h: 1,
                out_w: 1,
                kernel: 1,
                in_channels: fin,
                out_channels: fout,
                macs: conv_cost(1, 1, 1, fin as u64, fout as u64).standard,
            });
        }
        costs
    }

    /// Total multiply-accumulates of one forward pass over one image.
    pub fn count_flops(&self) -> u64 {
        self.layer_costs().iter().map(|c| c.macs).sum()
    }
}
