use alloc::format;

use crate::diff::{init_uniform_fan_in, Graph, ParamId, ParamStore, Result, Var};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Convolution with weight `[k, k, cin, cout]` and bias `[cout]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), init_uniform_fan_in(rng, &[k, k, cin, cout], k * k * cin));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, rng, name, 3, cin, cout, 1, 1)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(s, self.w), g.param(s, self.b));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(&format!("{name}.w"), init_uniform_fan_in(rng, &[din, dout], din));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(s, self.w), g.param(s, self.b));
        g.linear(x, w, Some(b))
    }
}

/// Layer norm over the last axis with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(s, self.gamma), g.param(s, self.beta));
        g.layernorm(x, ga, be)
    }
}

/// `x + conv2(gelu(conv1(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, ch: usize) -> Self {
        Self {
            c1: Conv::same3(store, rng, &format!("{name}.c1"), ch, ch),
            c2: Conv::same3(store, rng, &format!("{name}.c2"), ch, ch),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.c1.forward(g, s, x)?;
        let y = g.gelu(y)?;
        let y = self.c2.forward(g, s, y)?;
        g.add(x, y)
    }
}
