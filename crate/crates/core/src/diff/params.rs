use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::graph::Graph;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Learnable tensor with its accumulated gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step: u64,
    pub frozen: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: &str, value: Tensor<T>) -> Self {
        let n = value.len();
        Self {
            name: name.to_string(),
            value,
            grad: vec![T::zero(); n],
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step: 0,
            frozen: false,
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `scale * d(loss)/d(param)` from the graph's bound leaves.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, scale: f64) {
        let s = T::from_f64(scale);
        for (idx, var) in graph.bound_params() {
            let p = &mut self.params[idx];
            if p.frozen || !graph.requires_grad(var) {
                continue;
            }
            for (g, d) in p.grad.iter_mut().zip(graph.grad(var)) {
                *g += d * s;
            }
        }
    }

    /// The graph's parameter gradients flattened in parameter order, without
    /// touching the store. Frozen or unbound parameters contribute zeros.
    pub fn graph_grads(&self, graph: &Graph<T>) -> Vec<T> {
        let mut offsets = Vec::with_capacity(self.params.len());
        let mut n = 0;
        for p in &self.params {
            offsets.push(n);
            n += p.grad.len();
        }
        let mut flat = alloc::vec![T::zero(); n];
        for (idx, var) in graph.bound_params() {
            let p = &self.params[idx];
            if p.frozen || !graph.requires_grad(var) {
                continue;
            }
            let off = offsets[idx];
            flat[off..off + p.grad.len()].copy_from_slice(&graph.grad(var));
        }
        flat
    }

    /// Flattened copy of all gradients, in parameter order.
    pub fn flat_grads(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Adds a flattened gradient vector (as produced by [`Self::flat_grads`]).
    pub fn add_flat_grads(&mut self, flat: &[T], scale: f64) {
        let s = T::from_f64(scale);
        let mut off = 0;
        for p in &mut self.params {
            let n = p.grad.len();
            for (g, &d) in p.grad.iter_mut().zip(&flat[off..off + n]) {
                *g += d * s;
            }
            off += n;
        }
        assert_eq!(off, flat.len());
    }

    /// Same parameter names, values and frozen flags in another precision.
    /// Optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| {
                    let mut q = Parameter::new(&p.name, p.value.cast());
                    q.frozen = p.frozen;
                    q
                })
                .collect(),
        }
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform_fan_in<T: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_in(-bound, bound)))
}
