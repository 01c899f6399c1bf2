use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which part of the network a parameter belongs to; used for grouping
/// gradient and weight norms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Attention,
    Ffn,
    Gate,
    FinalNorm,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    /// 0-based layer index for per-layer parameters.
    pub layer: Option<usize>,
    /// True for matrices (as opposed to norm gains and gates).
    pub is_matrix: bool,
    pub value: Tensor<T>,
}

/// Flat, ordered list of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub(crate) fn push(
        &mut self,
        name: String,
        group: ParamGroup,
        layer: Option<usize>,
        is_matrix: bool,
        value: Tensor<T>,
    ) -> usize {
        self.entries.push(ParamEntry {
            name,
            group,
            layer,
            is_matrix,
            value,
        });
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

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| self.get_mut(i))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Records every parameter as a gradient-tracking leaf, in store order.
    pub fn bind(&self, tape: &Tape<T>) -> Vec<Var> {
        self.entries.iter().map(|e| tape.param(e.value.clone())).collect()
    }

    /// Collects gradients for bound parameters; a parameter that did not
    /// influence the loss gets zeros.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &[Var]) -> Result<Vec<Tensor<T>>> {
        if bound.len() != self.entries.len() {
            return Err(Error::MissingGradients);
        }
        Ok(self
            .entries
            .iter()
            .zip(bound)
            .map(|(e, &v)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(e.value.shape().to_vec())))
            .collect())
    }
}
