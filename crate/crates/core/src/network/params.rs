use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Role of a named tensor in [`Parameters`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Convolution kernel or linear weight matrix; L2-regularized.
    Weight,
    Bias,
    /// Batch-norm scale (gamma).
    Scale,
    /// Batch-norm shift (beta).
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn is_regularized(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Ordered, uniquely named tensors of a network: learnable weights plus
/// batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> Default for Parameters<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Real> Parameters<T> {
    pub(crate) fn push(&mut self, name: String, kind: ParamKind, tensor: Tensor<T>) -> usize {
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, tensor });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ParamEntry<T> {
        &self.entries[index]
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    /// Indices of learnable entries, in order.
    pub fn learnable(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].kind.is_learnable())
            .collect()
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_learnable())
            .map(|e| e.tensor.len())
            .sum()
    }

    /// `Σ w²` over regularized entries.
    pub fn l2(&self) -> T {
        self.entries
            .iter()
            .filter(|e| e.kind.is_regularized())
            .map(|e| e.tensor.sum_squares())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Replaces every tensor with the same-named one from `named`. Names,
    /// count and shapes must match exactly.
    pub fn assign_named(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::BadWeights(format!(
                "file holds {} tensors, network expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for (name, tensor) in named {
            let i = self
                .index_of(&name)
                .ok_or_else(|| Error::BadWeights(format!("unexpected tensor {name:?}")))?;
            let slot = &mut self.entries[i].tensor;
            if slot.shape() != tensor.shape() {
                return Err(Error::BadWeights(format!(
                    "tensor {name:?} has shape {:?}, network expects {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(())
    }
}
