//! `L = ω·MSE + (1 − ω)·CE + λ·R(W)`.
//!
//! MSE averages the four endpoint coordinates (and the batch), CE is the
//! negative log-probability of the true class, R sums the squares of every
//! convolution and linear weight, leaving batch-norm affine terms and biases
//! out.

use serde::{Deserialize, Serialize};

use super::data::{Endpoints, LabeledFrame};
use crate::class::LightClass;
use crate::error::{Error, Result};
use crate::network::Parameters;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: f64,
    pub ce: f64,
    pub reg: f64,
    pub total: f64,
}

/// Mixes already computed terms.
pub fn combine_terms(mse: f64, ce: f64, reg: f64, omega: f64, lambda: f64) -> f64 {
    omega * mse + (1.0 - omega) * ce + lambda * reg
}

pub fn check_weights(omega: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) || !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "loss weights need omega in [0, 1] and lambda >= 0, got {omega}, {lambda}"
        )));
    }
    Ok(())
}

/// Regression targets and mask for a batch; frames without a crossing get
/// mask 0.
pub fn regression_targets<T: Real>(labels: &[(LightClass, Option<Endpoints>)]) -> Result<(Tensor<T>, Vec<T>)> {
    let mut data = Vec::with_capacity(labels.len() * 4);
    let mut mask = Vec::with_capacity(labels.len());
    for (_, e) in labels {
        let a = e.map_or([0.0; 4], Endpoints::to_array);
        data.extend(a.iter().map(|&v| T::of(v)));
        mask.push(if e.is_some() { T::one() } else { T::zero() });
    }
    Ok((Tensor::new([labels.len(), 4], data)?, mask))
}

/// Vars of the recorded loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub ce: Var,
    pub reg: Var,
}

/// Records the composite loss on `graph`.
#[allow(clippy::too_many_arguments)]
pub fn record_loss<T: Real>(
    graph: &mut Graph<T>,
    logits: Var,
    endpoints: Var,
    labels: &[(LightClass, Option<Endpoints>)],
    regularized: &[Var],
    omega: f64,
    lambda: f64,
) -> Result<LossVars> {
    check_weights(omega, lambda)?;
    let (targets, mask) = regression_targets::<T>(labels)?;
    let classes: Vec<usize> = labels.iter().map(|(c, _)| c.index()).collect();
    let mse = graph.masked_mse(endpoints, &targets, &mask)?;
    let ce = graph.softmax_cross_entropy(logits, &classes)?;
    let reg = graph.sum_squares(regularized);
    let total = graph.combine(&[(mse, T::of(omega)), (ce, T::of(1.0 - omega)), (reg, T::of(lambda))])?;
    Ok(LossVars { total, mse, ce, reg })
}

impl LossVars {
    pub fn terms<T: Real>(&self, graph: &Graph<T>) -> LossTerms {
        let get = |v: Var| graph.value(v).data()[0].to_f64_lossy();
        LossTerms {
            mse: get(self.mse),
            ce: get(self.ce),
            reg: get(self.reg),
            total: get(self.total),
        }
    }
}

/// Loss of network outputs against labelled frames, with `R(W)` taken from
/// `params`.
pub fn loss<T: Real>(
    logits: &Tensor<T>,
    endpoints: &Tensor<T>,
    frames: &[&LabeledFrame],
    omega: f64,
    lambda: f64,
    params: &Parameters<T>,
) -> Result<LossTerms> {
    let labels: Vec<_> = frames.iter().map(|f| (f.class, f.endpoints)).collect();
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let e = g.constant(endpoints.clone());
    let weights: Vec<Var> = params
        .entries()
        .iter()
        .filter(|p| p.kind.is_regularized())
        .map(|p| g.constant(p.tensor.clone()))
        .collect();
    let vars = record_loss(&mut g, l, e, &labels, &weights, omega, lambda)?;
    Ok(vars.terms(&g))
}
