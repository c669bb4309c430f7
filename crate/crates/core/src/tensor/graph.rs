//! Reverse-mode tape. Every operation appends a node holding its output value
//! and whatever the backward pass needs; [`Graph::backward`] walks the tape
//! in reverse and leaves gradients on the leaf tensors.

use super::kernels::{self, BatchNormCache, ConvDescriptor};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Batch statistics; the node reports them so the caller can update
    /// running averages.
    Train,
    /// Fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        desc: ConvDescriptor,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    Relu6 {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MaskedMse {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
    },
    SumSquares {
        inputs: Vec<Var>,
    },
    Combine {
        terms: Vec<(Var, T)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by convolution and linear nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient left on a leaf by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, desc: ConvDescriptor) -> Result<Var> {
        let (out, macs) = kernels::conv2d_forward(self.value(input), self.value(weight), &desc)?;
        self.macs += macs;
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(out, Op::Conv2d { input, weight, desc }, rg))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let channels = self.value(gamma).len();
        if self.value(beta).len() != channels {
            return Err(Error::ShapeMismatch {
                context: "batch norm beta vs gamma",
                expected: self.value(gamma).shape().to_vec(),
                actual: self.value(beta).shape().to_vec(),
            });
        }
        let x = self.value(input);
        let (stats, training) = match mode {
            BatchNormMode::Train => {
                let (mean, var) = kernels::channel_moments(x, channels)?;
                let count = x.len() / channels;
                (BatchStats { mean, var, count }, true)
            }
            BatchNormMode::Eval { mean, var } => (
                BatchStats {
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                    count: 0,
                },
                false,
            ),
        };
        if stats.mean.len() != channels || stats.var.len() != channels {
            return Err(Error::invalid("running statistics do not match channel count"));
        }
        let (out, cache) = kernels::batch_norm_forward(
            x,
            self.value(gamma).data(),
            self.value(beta).data(),
            &stats.mean,
            &stats.var,
            eps,
            training,
        )?;
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        );
        Ok((v, training.then_some(stats)))
    }

    pub fn relu6(&mut self, input: Var) -> Var {
        let out = self.value(input).map(kernels::relu6);
        let rg = self.needs(input);
        self.push(out, Op::Relu6 { input }, rg)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                context: "elementwise add",
                expected: a.shape().to_vec(),
                actual: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(out, Op::Add { lhs, rhs }, rg))
    }

    pub fn max_pool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d_forward(self.value(input), window, stride)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avgpool_forward(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (out, macs) = kernels::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        self.macs += macs;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = kernels::softmax_forward(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Softmax { input }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "cross entropy logits vs labels",
                expected: vec![labels.len(), 0],
                actual: x.shape().to_vec(),
            });
        }
        let classes = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = kernels::softmax_forward(x)?.into_data();
        let mut loss = T::zero();
        for (row, &l) in x.data().chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[l];
        }
        loss /= T::of(labels.len() as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ_n mask_n · Σ_j (pred − target)² / (N·D)` for `(N, D)` predictions.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor<T>, mask: &[T]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.rank() != 2 || mask.len() != p.shape()[0] {
            return Err(Error::ShapeMismatch {
                context: "mse prediction vs target",
                expected: target.shape().to_vec(),
                actual: p.shape().to_vec(),
            });
        }
        let d = p.shape()[1];
        let mut sum = T::zero();
        for ((pr, tr), &m) in p.data().chunks_exact(d).zip(target.data().chunks_exact(d)).zip(mask) {
            let sq: T = pr.iter().zip(tr).map(|(&a, &b)| (a - b) * (a - b)).sum();
            sum += m * sq;
        }
        let loss = sum / T::of(p.len() as f64);
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of squared elements over all `inputs`.
    pub fn sum_squares(&mut self, inputs: &[Var]) -> Var {
        let total = inputs.iter().map(|&v| self.value(v).sum_squares()).sum();
        let rg = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::scalar(total),
            Op::SumSquares {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::ShapeMismatch {
                    context: "combine expects scalar terms",
                    expected: vec![1],
                    actual: t.shape().to_vec(),
                });
            }
            total += c * t.data()[0];
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(total),
            Op::Combine {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check_root(root)?;
        let len = self.value(root).len();
        if len != 1 {
            return Err(Error::ShapeMismatch {
                context: "backward without upstream gradient needs a scalar root",
                expected: vec![1],
                actual: self.value(root).shape().to_vec(),
            });
        }
        self.propagate(root, vec![T::one()])
    }

    /// Back-propagates an arbitrary upstream gradient from `root`.
    pub fn backward_with(&mut self, root: Var, upstream: &Tensor<T>) -> Result<()> {
        self.check_root(root)?;
        if upstream.shape() != self.value(root).shape() {
            return Err(Error::ShapeMismatch {
                context: "upstream gradient vs root",
                expected: self.value(root).shape().to_vec(),
                actual: upstream.shape().to_vec(),
            });
        }
        self.propagate(root, upstream.data().to_vec())
    }

    fn check_root(&self, root: Var) -> Result<()> {
        let recorded = self.nodes.iter().any(|n| !matches!(n.op, Op::Leaf));
        if !recorded || root.0 >= self.nodes.len() {
            return Err(Error::NothingRecorded);
        }
        Ok(())
    }

    fn propagate(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (v, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, desc } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    desc,
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                )?;
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dw.map(|d| (*weight, d)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) =
                    kernels::batch_norm_backward(node.value.shape(), self.value(*gamma).data(), cache, g);
                out.push((*input, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Relu6 { input } => out.push((*input, kernels::relu6_backward(self.value(*input).data(), g))),
            Op::Add { lhs, rhs } => {
                out.push((*lhs, g.to_vec()));
                out.push((*rhs, g.to_vec()));
            }
            Op::MaxPool { input, argmax } => {
                out.push((*input, kernels::maxpool2d_backward(self.value(*input).len(), argmax, g)));
            }
            Op::GlobalAvgPool { input } => {
                out.push((*input, kernels::global_avgpool_backward(self.value(*input).shape(), g)));
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) =
                    kernels::linear_backward(self.value(*input), self.value(*weight), self.value(*bias), g)?;
                out.push((*input, dx));
                out.push((*weight, dw));
                out.push((*bias, db));
            }
            Op::Softmax { input } => {
                let classes = node.value.shape()[1];
                out.push((*input, kernels::softmax_backward(node.value.data(), g, classes)));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &l) in d.chunks_exact_mut(classes).zip(labels) {
                    row[l] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                out.push((*logits, d));
            }
            Op::MaskedMse { pred, target, mask } => {
                let p = self.value(*pred);
                let dim = p.shape()[1];
                let scale = g[0] * T::of(2.0) / T::of(p.len() as f64);
                let d = p
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(j, (&a, &b))| scale * mask[j / dim] * (a - b))
                    .collect();
                out.push((*pred, d));
            }
            Op::SumSquares { inputs } => {
                let two = T::of(2.0) * g[0];
                for &v in inputs {
                    out.push((v, self.value(v).data().iter().map(|&x| two * x).collect()));
                }
            }
            Op::Combine { terms } => {
                for &(v, c) in terms {
                    out.push((v, vec![c * g[0]]));
                }
            }
        }
        Ok(out)
    }
}
