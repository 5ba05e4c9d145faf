use crate::error::{Error, Result};

use super::{Grads, Graph, Scalar, Tensor, Var};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    frozen: Vec<bool>,
}

/// Graph handles for every parameter of a [`ParamSet`] within one pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[cfg(test)]
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), frozen: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Frozen parameters enter the graph as constants and are skipped by the optimizer.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Record every parameter on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.frozen)
            .map(|(v, &f)| if f { g.constant(v.clone()) } else { g.leaf(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Record every parameter on `g` as a constant (inference).
    pub fn bind_constant(&self, g: &mut Graph<T>) -> Bound {
        Bound { vars: self.values.iter().map(|v| g.constant(v.clone())).collect() }
    }

    /// Per-parameter gradients, zero where the loss did not depend on a parameter.
    pub fn gradients(&self, bound: &Bound, grads: &mut Grads<T>) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), frozen: self.frozen.clone() }
    }

    /// Overwrite values from `(name, tensor)` pairs; every parameter must be present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name}")))?;
            if t.shape() != value.shape() {
                return Err(Error::Format(format!("parameter {name}: shape {:?} in checkpoint, {:?} expected", t.shape(), value.shape())));
            }
            *value = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}
