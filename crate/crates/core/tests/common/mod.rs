#![allow(dead_code)]

pub mod fsm;
pub mod metrics;

use lytnet::class::LightClass;
use lytnet::network::{build_lytnet, Bound, Mode, NetworkConfig};
use lytnet::tensor::{BatchNormMode, ConvDescriptor, Graph, Tensor, Var};
use lytnet::training::{record_loss, Endpoints};
use lytnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Through the whole network a wider step crosses ReLU6 kinks.
pub const NETWORK_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), bound, rng)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    rel_err_floor(a, n, FLOOR)
}

pub fn rel_err_floor(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Builds an expression from the leaves; the builder must be pure.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn projected(build: &Builder, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

/// Largest relative error between analytic and central-difference gradients
/// of `⟨build(inputs), r⟩` for a random projection `r`. `sample` limits how
/// many coordinates of each input are perturbed (all when `None`).
pub fn check(build: &Builder, inputs: Vec<Tensor<f64>>, seed: u64, sample: Option<usize>) -> f64 {
    check_detailed(build, inputs, seed, sample, STEP, false).worst
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckReport {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates where differences at `step` and `step / 4` disagree,
    /// i.e. the perturbation crossed a kink.
    pub skipped: usize,
}

pub fn check_detailed(
    build: &Builder,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    sample: Option<usize>,
    step: f64,
    skip_kinks: bool,
) -> CheckReport {
    let mut r = rng(seed ^ 0xfeed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let shape = g.value(out).shape().to_vec();
    let proj = rand_tensor(&shape, 1.0, &mut r);
    g.backward_with(out, &proj).expect("backward");
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf gradient").to_vec()).collect();

    // Roundoff in a central difference grows as 1 / step.
    let floor = FLOOR * STEP / step;
    let mut report = CheckReport::default();
    let mut inputs = inputs;
    let central = |inputs: &mut [Tensor<f64>], k: usize, i: usize, h: f64| {
        let orig = inputs[k].data()[i];
        inputs[k].data_mut()[i] = orig + h;
        let plus = projected(build, inputs, &proj);
        inputs[k].data_mut()[i] = orig - h;
        let minus = projected(build, inputs, &proj);
        inputs[k].data_mut()[i] = orig;
        (plus - minus) / (2.0 * h)
    };
    for k in 0..inputs.len() {
        let len = inputs[k].len();
        let coords: Vec<usize> = match sample {
            Some(s) if s < len => (0..s).map(|_| r.gen_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let numeric = central(&mut inputs, k, i, step);
            if skip_kinks {
                let fine = central(&mut inputs, k, i, step / 4.0);
                if rel_err_floor(fine, numeric, floor) > TOLERANCE {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            report.worst = report.worst.max(rel_err_floor(analytic[k][i], numeric, floor));
        }
    }
    report
}

fn small_conv(desc: ConvDescriptor, n: usize, hw: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[n, desc.in_channels, hw, hw], 1.0, &mut r);
    let w = rand_tensor(&desc.weight_shape(), 1.0, &mut r);
    check(&move |g, v| g.conv2d(v[0], v[1], desc), vec![x, w], seed, None)
}

/// Named per-op gradient checks; each returns the worst relative error for a
/// seed.
pub fn op_checks() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("conv2d standard 3x3 stride 1", |s| small_conv(ConvDescriptor::standard(2, 3, 3, 1, 1), 2, 5, s)),
        ("conv2d standard 3x3 stride 2", |s| small_conv(ConvDescriptor::standard(3, 2, 3, 2, 1), 2, 6, s)),
        ("conv2d depthwise 3x3 stride 1", |s| small_conv(ConvDescriptor::depthwise(3, 3, 1, 1), 2, 5, s)),
        ("conv2d depthwise 3x3 stride 2", |s| small_conv(ConvDescriptor::depthwise(4, 3, 2, 1), 1, 6, s)),
        ("conv2d pointwise", |s| small_conv(ConvDescriptor::pointwise(3, 4), 2, 4, s)),
        ("batch norm train", |s| {
            let mut r = rng(s);
            let x = rand_tensor(&[3, 2, 3, 3], 2.0, &mut r);
            let gamma = rand_tensor(&[2], 1.5, &mut r);
            let beta = rand_tensor(&[2], 1.0, &mut r);
            check(
                &|g, v| Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?.0),
                vec![x, gamma, beta],
                s,
                None,
            )
        }),
        ("batch norm eval", |s| {
            let mut r = rng(s);
            let x = rand_tensor(&[2, 3, 2, 2], 2.0, &mut r);
            let gamma = rand_tensor(&[3], 1.5, &mut r);
            let beta = rand_tensor(&[3], 1.0, &mut r);
            let mean: Vec<f64> = (0..3).map(|_| r.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..2.0)).collect();
            check(
                &|g, v| {
                    let mode = BatchNormMode::Eval { mean: &mean, var: &var };
                    Ok(g.batch_norm(v[0], v[1], v[2], mode, 1e-5)?.0)
                },
                vec![x, gamma, beta],
                s,
                None,
            )
        }),
        ("relu6", |s| {
            let mut r = rng(s);
            let x = rand_tensor(&[2, 3, 4], 1.0, &mut r).map(|v| 3.0 + 5.0 * v);
            check(&|g, v| Ok(g.relu6(v[0])), vec![x], s, None)
        }),
        ("add", |s| {
            let mut r = rng(s);
            let a = rand_tensor(&[2, 3, 2, 2], 1.0, &mut r);
            let b = rand_tensor(&[2, 3, 2, 2], 1.0, &mut r);
            check(&|g, v| g.add(v[0], v[1]), vec![a, b], s, None)
        }),
        ("max pool 2x2", |s| {
            let mut r = rng(s);
            let x = rand_tensor(&[2, 2, 4, 6], 1.0, &mut r);
            check(&|g, v| g.max_pool(v[0], 2, 2), vec![x], s, None)
        }),
        ("global average pool", |s| {
            let mut r = rng(s);
            let x = rand_tensor(&[2, 3, 3, 2], 1.0, &mut r);
            check(&|g, v| g.global_avg_pool(v[0]), vec![x], s, None)
        }),
        ("linear", |s| {
            let mut r = rng(s);
            let x = rand_tensor(&[3, 4], 1.0, &mut r);
            let w = rand_tensor(&[5, 4], 1.0, &mut r);
            let b = rand_tensor(&[5], 1.0, &mut r);
            check(&|g, v| g.linear(v[0], v[1], v[2]), vec![x, w, b], s, None)
        }),
        ("softmax", |s| {
            let mut r = rng(s);
            let x = rand_tensor(&[3, 5], 3.0, &mut r);
            check(&|g, v| g.softmax(v[0]), vec![x], s, None)
        }),
        ("softmax cross entropy", |s| {
            let mut r = rng(s);
            let x = rand_tensor(&[4, 5], 3.0, &mut r);
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            check(&move |g, v| g.softmax_cross_entropy(v[0], &labels), vec![x], s, None)
        }),
        ("masked mse", |s| {
            let mut r = rng(s);
            let p = rand_tensor(&[3, 4], 1.0, &mut r);
            let t = rand_tensor(&[3, 4], 1.0, &mut r);
            let mask = vec![1.0, 0.0, 1.0];
            check(&move |g, v| g.masked_mse(v[0], &t, &mask), vec![p], s, None)
        }),
        ("sum of squares", |s| {
            let mut r = rng(s);
            let a = rand_tensor(&[3, 2], 1.0, &mut r);
            let b = rand_tensor(&[4], 1.0, &mut r);
            check(&|g, v| Ok(g.sum_squares(&[v[0], v[1]])), vec![a, b], s, None)
        }),
        ("composite loss", composite_loss),
    ]
}

/// ω·MSE + (1 − ω)·CE + λ·R on free logits, endpoints and two weight tensors,
/// with one frame lacking a crossing.
pub fn composite_loss(seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = rand_tensor(&[3, 5], 2.0, &mut r);
    let endpoints = rand_tensor(&[3, 4], 1.0, &mut r).map(|v| 0.5 + 0.5 * v);
    let w1 = rand_tensor(&[2, 3], 1.0, &mut r);
    let w2 = rand_tensor(&[4], 1.0, &mut r);
    let mut labels = Vec::new();
    for i in 0..3 {
        let class = LightClass::from_index(r.gen_range(0..5)).unwrap();
        let e = (i != 1).then(|| Endpoints::new(r.gen(), r.gen_range(0.5..1.0), r.gen(), r.gen_range(0.0..0.5)));
        labels.push((class, e));
    }
    let omega = r.gen_range(0.1..0.9);
    let lambda = r.gen_range(0.01..0.5);
    check(
        &move |g, v| Ok(record_loss(g, v[0], v[1], &labels, &[v[2], v[3]], omega, lambda)?.total),
        vec![logits, endpoints, w1, w2],
        seed,
        None,
    )
}

/// Composite loss through a narrow network on a `side`² batch of two, checked
/// on sampled coordinates of the input and every parameter tensor.
pub fn network_loss(seed: u64, side: usize) -> CheckReport {
    let cfg = NetworkConfig::default().with_width(0.25).with_input(side, side);
    let (net, params) = build_lytnet::<f64>(cfg, seed).unwrap();
    let mut r = rng(seed);
    let x = rand_tensor(&[2, 3, side, side], 2.0, &mut r);
    let labels = vec![
        (LightClass::Red, Some(Endpoints::new(0.4, 0.8, 0.5, 0.5))),
        (LightClass::CountdownBlank, None),
    ];
    let names: Vec<usize> = params.learnable();
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|&i| params.tensor(i).clone()));
    let build = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let mut p = params.clone();
        let leaves: Vec<(usize, Var)> = names.iter().enumerate().map(|(k, &i)| (i, v[k + 1])).collect();
        let bound = Bound::from_leaves(&p, &leaves)?;
        let out = net.forward_graph(g, &bound, &mut p, v[0], Mode::Train)?;
        let regularized: Vec<Var> = names
            .iter()
            .enumerate()
            .filter(|&(_, &i)| p.entry(i).kind.is_regularized())
            .map(|(k, _)| v[k + 1])
            .collect();
        Ok(record_loss(g, out.logits, out.endpoints, &labels, &regularized, 0.5, 1e-3)?.total)
    };
    check_detailed(&build, inputs, seed, Some(3), NETWORK_STEP, true)
}

/// Activation shape `(C, H, W)` entering each stage at α = 1 and a 576×768
/// input. The 160-channel row is printed in the reference table as 12×9×160,
/// which contradicts the 96-channel row before it; the consistent value is
/// used.
pub const STAGE_INPUTS: [(&str, [usize; 3]); 13] = [
    ("conv2d 3x3", [3, 576, 768]),
    ("maxpool 2x2", [32, 288, 384]),
    ("bottleneck group 0", [32, 144, 192]),
    ("bottleneck group 1", [16, 144, 192]),
    ("bottleneck group 2", [24, 72, 96]),
    ("bottleneck group 3", [24, 72, 96]),
    ("bottleneck group 4", [32, 36, 48]),
    ("bottleneck group 5", [64, 18, 24]),
    ("bottleneck group 6", [64, 18, 24]),
    ("bottleneck group 7", [96, 18, 24]),
    ("bottleneck group 8", [160, 9, 12]),
    ("conv2d 1x1", [320, 9, 12]),
    ("avgpool", [1280, 9, 12]),
];

pub const HEAD_INPUTS: [(&str, usize); 4] = [
    ("classifier fc1", 1280),
    ("classifier fc2", 160),
    ("regressor fc1", 1280),
    ("regressor fc2", 80),
];

/// Runs α = 1 at 576×768 and compares the traced stage inputs and outputs
/// with the table. Returns a description of the first mismatch.
pub fn shape_conformance() -> std::result::Result<(), String> {
    let (net, params) = build_lytnet::<f32>(NetworkConfig::default(), 3).map_err(|e| e.to_string())?;
    let mut g = Graph::<f32>::new();
    let bound = net.bind(&mut g, &params, false);
    let mut r = rng(5);
    let x = g.constant(Tensor::uniform([1, 3, 576, 768], 1.0, &mut r));
    let mut p = params.clone();
    let out = net
        .forward_graph(&mut g, &bound, &mut p, x, Mode::Eval)
        .map_err(|e| e.to_string())?;
    let expected: Vec<(String, Vec<usize>)> = STAGE_INPUTS
        .iter()
        .map(|(n, s)| (n.to_string(), [&[1][..], &s[..]].concat()))
        .chain(HEAD_INPUTS.iter().map(|(n, c)| (n.to_string(), vec![1, *c])))
        .collect();
    if out.trace != expected {
        return Err(format!("trace {:?} != {:?}", out.trace, expected));
    }
    let shapes = (g.value(out.logits).shape().to_vec(), g.value(out.endpoints).shape().to_vec());
    if shapes != (vec![1, 5], vec![1, 4]) {
        return Err(format!("head outputs {shapes:?}"));
    }
    Ok(())
}

/// Direct nested-loop convolution that counts every multiply-accumulate it
/// performs, padded taps included.
pub fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, desc: &ConvDescriptor) -> (Tensor<f64>, u64) {
    use lytnet::tensor::ConvMode;
    let (n, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (ci, co, k, s) = (desc.in_channels, desc.out_channels, desc.kernel_size, desc.stride);
    let (ph, pw) = (desc.padding[0] as isize, desc.padding[1] as isize);
    let (oh, ow) = desc.output_hw(h, wd).unwrap();
    let mut out = vec![0.0; n * co * oh * ow];
    let mut macs = 0u64;
    let depthwise = desc.mode == ConvMode::Depthwise;
    for b in 0..n {
        for o in 0..co {
            let inputs: Vec<usize> = if depthwise { vec![o] } else { (0..ci).collect() };
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for &i in &inputs {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * s + ky) as isize - ph;
                                let xx = (ox * s + kx) as isize - pw;
                                let v = if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    0.0
                                } else {
                                    x.data()[((b * ci + i) * h + y as usize) * wd + xx as usize]
                                };
                                let wi = if depthwise { (o * k + ky) * k + kx } else { ((o * ci + i) * k + ky) * k + kx };
                                acc += w.data()[wi] * v;
                                macs += 1;
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (Tensor::new([n, co, oh, ow], out).unwrap(), macs)
}

/// Random layer: `(h, w, k, d_i, d_j, stride)` with "same" padding.
pub fn random_layer(r: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize) {
    let k = [1, 3, 5][r.gen_range(0..3)];
    (
        r.gen_range(3..12),
        r.gen_range(3..12),
        k,
        r.gen_range(1..7),
        r.gen_range(1..9),
        r.gen_range(1..3),
    )
}

/// Checks executed and counted MACs against the analytic standard and
/// separable costs for one random layer; returns a failure description.
pub fn cost_equivalence(seed: u64) -> std::result::Result<(), String> {
    use lytnet::tensor::{conv_cost, kernels, ConvCost};
    let mut r = rng(seed);
    let (h, w, k, di, dj, s) = random_layer(&mut r);
    let pad = k / 2;
    let x = rand_tensor(&[1, di, h, w], 1.0, &mut r);
    let std_desc = ConvDescriptor::standard(di, dj, k, s, pad);
    let dw_desc = ConvDescriptor::depthwise(di, k, s, pad);
    let pw_desc = ConvDescriptor::pointwise(di, dj);
    let ws = rand_tensor(&std_desc.weight_shape(), 1.0, &mut r);
    let wd = rand_tensor(&dw_desc.weight_shape(), 1.0, &mut r);
    let wp = rand_tensor(&pw_desc.weight_shape(), 1.0, &mut r);
    let (oh, ow) = std_desc.output_hw(h, w).unwrap();
    let cost = conv_cost(oh as u64, ow as u64, k as u64, di as u64, dj as u64);

    let (_, std_lib) = kernels::conv2d_forward(&x, &ws, &std_desc).unwrap();
    let (_, std_ref) = reference_conv(&x, &ws, &std_desc);
    let (mid, dw_lib) = kernels::conv2d_forward(&x, &wd, &dw_desc).unwrap();
    let (_, dw_ref) = reference_conv(&x, &wd, &dw_desc);
    let (_, pw_lib) = kernels::conv2d_forward(&mid, &wp, &pw_desc).unwrap();
    let (_, pw_ref) = reference_conv(&mid, &wp, &pw_desc);
    let layer = format!("h={h} w={w} k={k} d_i={di} d_j={dj} s={s}");
    if std_lib != cost.standard || std_ref != cost.standard {
        return Err(format!("{layer}: standard {std_lib}/{std_ref} vs {}", cost.standard));
    }
    if dw_lib + pw_lib != cost.separable || dw_ref + pw_ref != cost.separable {
        return Err(format!("{layer}: separable {}/{} vs {}", dw_lib + pw_lib, dw_ref + pw_ref, cost.separable));
    }
    let (num, den) = ConvCost::ratio_fraction(k as u64, dj as u64);
    if cost.standard * den != cost.separable * num {
        return Err(format!("{layer}: ratio {num}/{den} does not relate the costs"));
    }
    if cost.ratio != num as f64 / den as f64 {
        return Err(format!("{layer}: ratio {}", cost.ratio));
    }
    Ok(())
}
