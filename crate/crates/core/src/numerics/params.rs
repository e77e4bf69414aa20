//! Named, ordered parameter registry shared by layers, the optimizer,
//! and checkpointing.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Stable handle to one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub(crate) usize);

impl PId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// All learnable tensors of a model, in registration order. Layers hold
/// `PId`s; a forward pass turns the whole set into tape leaves once and
/// indexes the resulting `Var` slice.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> PId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        PId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: PId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: PId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter_mut())
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.values.len()).map(PId)
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Push every parameter onto the tape as a differentiable leaf.
    /// The returned vector is indexed by `PId::index`.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Inverse of softplus: returns x with softplus(x) = y, y > 0.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_is_stable() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::from_vec(vec![1.0]));
        let b = ps.add("b", Tensor::from_vec(vec![2.0]));
        assert_eq!(ps.name(a), "a");
        assert_eq!(ps.value(b).data, vec![2.0]);
        assert_eq!(ps.len(), 2);
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [0.001, 0.1, 1.0, 5.0, 40.0] {
            let x = softplus_inverse(y);
            let sp = if x > 30.0 { x } else { x.exp().ln_1p() };
            assert!((sp - y).abs() < 1e-9, "y={y} sp={sp}");
        }
    }
}
