use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Parameters;
use crate::tensor::Real;

/// Step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            factor: 0.1,
            milestones: vec![150, 400, 650],
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

/// Learning rate of the default schedule at `epoch`.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().rate(epoch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        let zeros = |i: usize| {
            let e = params.entry(i);
            if e.kind.is_learnable() {
                vec![T::zero(); e.tensor.len()]
            } else {
                Vec::new()
            }
        };
        Self {
            step: 0,
            first: (0..params.len()).map(zeros).collect(),
            second: (0..params.len()).map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update. `grads` pairs parameter indices with
/// gradients of matching length.
pub fn adam_step<T: Real>(
    params: &mut Parameters<T>,
    grads: &[(usize, Vec<T>)],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (i, g) in grads {
        let len = params.tensor(*i).len();
        if g.len() != len || state.first.get(*i).map(Vec::len) != Some(len) {
            return Err(Error::ShapeMismatch {
                context: "adam gradient vs parameter",
                expected: params.tensor(*i).shape().to_vec(),
                actual: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for (i, g) in grads {
        let m = &mut state.first[*i];
        let v = &mut state.second[*i];
        let w = params.tensor_mut(*i).data_mut();
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            w[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
