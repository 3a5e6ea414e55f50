use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// A trainable array with its gradient accumulator and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub state: BTreeMap<String, Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad, state: BTreeMap::new() }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameters. Insertion order is the
/// checkpoint order and the gradient reduction order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: Parameter) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != param.name),
            "duplicate parameter name {}",
            param.name
        );
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    /// Uniform initialization in `[-1/√fan_in, 1/√fan_in]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut value = Tensor::zeros(shape);
        value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
        self.push(Parameter::new(name, value))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(Parameter::new(name, Tensor::zeros(shape)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f64] {
        self.params[id.0].value.data()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&self) -> GradStore {
        GradStore { grads: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect() }
    }

    /// Adds a per-sample gradient into the accumulators.
    pub fn accumulate(&mut self, grads: &GradStore) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            super::kernels::add_assign(p.grad.data_mut(), g);
        }
    }

    /// Overwrites values (and optimizer state) from `other` for every parameter
    /// whose name appears in both stores. Shapes must agree.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(q) = other.params.iter().find(|q| q.name == p.name) {
                if q.value.shape() != p.value.shape() {
                    return Err(Error::dim(
                        "load_parameters",
                        format!("{}: stored {:?}, model {:?}", p.name, q.shape(), p.shape()),
                    ));
                }
                p.value = q.value.clone();
                p.state = q.state.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// SHA-256 over names and value bit patterns of the selected parameters.
    pub fn checksum(&self, mut select: impl FnMut(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| select(&p.name)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-sample gradients, parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            super::kernels::add_assign(a, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(Vec::as_slice)
    }
}
