use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, WindowSpec};
use super::params::{ParamId, ParamStore};
use super::{DiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulScalar(Var, Var),
    Abs(Var),
    Gelu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
        mean: bool,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    Upsample {
        x: Var,
        r: usize,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        spec: WindowSpec,
        probs: Vec<T>,
    },
}

/// Layer-norm epsilon added to the variance.
pub const LN_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// `(outer, len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(full: &[usize], part: &[usize]) -> bool {
    part.len() <= full.len() && full[full.len() - part.len()..] == *part
}

/// Reverse-mode tape. See the module docs.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<usize, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// Graph that records no gradient information (inference).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; zeros when the node was not reached.
    pub fn grad(&self, v: Var) -> Vec<T> {
        let n = &self.nodes[v.0];
        if n.grad.is_empty() {
            vec![T::zero(); n.value.len()]
        } else {
            n.grad.clone()
        }
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, rg: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len(), "{name}");
        if T::VERIFY && value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: name });
        }
        let requires_grad = rg && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            grad: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter (once per graph). Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.bound.insert(id.0, v);
        v
    }

    pub(crate) fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().map(|(&k, &v)| (k, v))
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.tensor(x);
        self.input(t)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if !is_suffix(sa, sb) {
            return Err(DiffError::ShapeMismatch {
                op: name,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let bv = &self.nodes[b.0].value;
        let nb = bv.len().max(1);
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let shape = sa.clone();
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.rg(&[a, b]);
        self.push(name, shape, value, op, rg)
    }

    /// `a + b`, where `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a]);
        self.push("scale", shape, value, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a]);
        self.push("add_const", shape, value, Op::AddConst(a), rg)
    }

    /// Multiplies every element of `a` by the one-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(DiffError::InvalidShape {
                op: "mul_scalar",
                shape: self.nodes[s.0].shape.clone(),
                reason: "scale must have exactly one element".to_string(),
            });
        }
        let c = self.nodes[s.0].value[0];
        let value = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, s]);
        self.push("mul_scalar", shape, value, Op::MulScalar(a, s), rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a]);
        self.push(name, shape, value, op, rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    /// `[.., k] x [k, n] -> [.., n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[a.0].value.len() / k.max(1);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let mut value = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, false, T::zero(), &mut value);
        let rg = self.rg(&[a, b]);
        self.push("matmul", shape, value, Op::MatMul(a, b), rg)
    }

    /// `x W + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Transpose of a rank-2 node.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(DiffError::InvalidShape {
                op: "transpose",
                shape: s.clone(),
                reason: "expected rank 2".to_string(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[a.0].value;
        let mut value = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", vec![c, r], value, Op::Transpose(a), rg)
    }

    /// 2-D convolution on an `[H, W, Cin]` node with weight `[kh, kw, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 3 || sw.len() != 4 || sx[2] != sw[2] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        if let Some(b) = b {
            if self.nodes[b.0].shape != [sw[3]] {
                return Err(DiffError::ShapeMismatch {
                    op: "conv2d",
                    lhs: sw.clone(),
                    rhs: self.nodes[b.0].shape.clone(),
                });
            }
        }
        let geom = ConvGeom::new((sx[0], sx[1], sx[2]), (sw[0], sw[1], sw[3]), stride, pad).ok_or_else(|| {
            DiffError::InvalidShape {
                op: "conv2d",
                shape: sx.clone(),
                reason: format!("kernel {}x{} stride {stride} pad {pad} does not fit", sw[0], sw[1]),
            }
        })?;
        let bias = b.map(|b| self.nodes[b.0].value.as_slice());
        let (value, cols) = kernels::conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, bias, &geom);
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        let cols = if rg && self.grad_enabled { cols } else { Vec::new() };
        self.push(
            "conv2d",
            vec![geom.ho, geom.wo, geom.cout],
            value,
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        )
    }

    /// 3x3 depthwise convolution (stride 1, zero padding 1), weight `[3, 3, C]`.
    pub fn depthwise3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 3 || sw.len() != 3 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[2] {
            return Err(DiffError::ShapeMismatch {
                op: "depthwise3x3",
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        let dims = (sx[0], sx[1], sx[2]);
        let bias = b.map(|b| self.nodes[b.0].value.as_slice());
        let value = kernels::depthwise_forward(&self.nodes[x.0].value, dims, &self.nodes[w.0].value, bias);
        let shape = sx.clone();
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        self.push("depthwise3x3", shape, value, Op::Depthwise { x, w, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(&[x]);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x), rg)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if axis >= s.len() || start + len > s[axis] {
            return Err(DiffError::InvalidShape {
                op: "slice",
                shape: s.clone(),
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, n, inner) = split_axis(s, axis);
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push("slice", shape, value, Op::Slice { x, axis, start }, rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[xs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(DiffError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = &self.nodes[v.0].shape;
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.nodes[v.0].shape[axis];
                value.extend_from_slice(&self.nodes[v.0].value[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        self.push("concat", shape, value, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().ok_or_else(|| DiffError::InvalidShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "rank 0".to_string(),
        })?;
        let mut value = self.nodes[x.0].value.clone();
        for row in value.chunks_exact_mut(n.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x]);
        self.push("softmax", shape, value, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let c = shape.last().copied().unwrap_or(0);
        if c == 0 || self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(DiffError::ShapeMismatch {
                op: "layernorm",
                lhs: shape,
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let rows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut value = vec![T::zero(); xv.len()];
        let inv_c = T::one() / T::from_usize(c);
        let eps = T::from_f64(LN_EPS);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let h = (row[i] - mean) * rs;
                xhat[r * c + i] = h;
                value[r * c + i] = h * g[i] + b[i];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push("layernorm", shape, value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", vec![1], vec![s], Op::SumAll(x), rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len().max(1));
        let rg = self.rg(&[x]);
        self.push("mean", vec![1], vec![s], Op::MeanAll(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if axis >= s.len() {
            return Err(DiffError::InvalidShape {
                op: "sum_axis",
                shape: s,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..][..inner];
                for (d, &v) in value[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_usize(n.max(1));
            for v in value.iter_mut() {
                *v *= inv;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        self.push("sum_axis", shape, value, Op::SumAxis { x, axis, mean }, rg)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Averages out `axis`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// `[H, W, C] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 3 {
            return Err(DiffError::InvalidShape {
                op: "global_avg_pool",
                shape: s,
                reason: "expected HxWxC".to_string(),
            });
        }
        let flat = self.reshape(x, &[s[0] * s[1], s[2]])?;
        self.mean_axis(flat, 0)
    }

    fn image_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(DiffError::InvalidShape {
                op,
                shape: s.clone(),
                reason: "expected HxWxC".to_string(),
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// `[H, W, C*r*r] -> [H*r, W*r, C]` with
    /// `out(y*r+dy, x*r+dx, c) = in(y, x, c*r*r + dy*r + dx)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = self.image_dims("pixel_shuffle", x)?;
        if r == 0 || c % (r * r) != 0 {
            return Err(DiffError::InvalidShape {
                op: "pixel_shuffle",
                shape: vec![h, w, c],
                reason: format!("channels not divisible by {r}^2"),
            });
        }
        let co = c / (r * r);
        let (ho, wo) = (h * r, w * r);
        let src = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); src.len()];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..co {
                    value[(oy * wo + ox) * co + ch] = src[kernels::shuffle_index((h, w, co), r, oy, ox, ch)];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push("pixel_shuffle", vec![ho, wo, co], value, Op::PixelShuffle { x, r }, rg)
    }

    /// Exact inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (ho, wo, co) = self.image_dims("pixel_unshuffle", x)?;
        if r == 0 || ho % r != 0 || wo % r != 0 {
            return Err(DiffError::InvalidShape {
                op: "pixel_unshuffle",
                shape: vec![ho, wo, co],
                reason: format!("spatial dims not divisible by {r}"),
            });
        }
        let (h, w) = (ho / r, wo / r);
        let src = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); src.len()];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..co {
                    value[kernels::shuffle_index((h, w, co), r, oy, ox, ch)] = src[(oy * wo + ox) * co + ch];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push("pixel_unshuffle", vec![h, w, co * r * r], value, Op::PixelUnshuffle { x, r }, rg)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = self.image_dims("upsample_nearest", x)?;
        let (ho, wo) = (h * r, w * r);
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            for ox in 0..wo {
                let s = ((oy / r) * w + ox / r) * c;
                value.extend_from_slice(&src[s..s + c]);
            }
        }
        let rg = self.rg(&[x]);
        self.push("upsample_nearest", vec![ho, wo, c], value, Op::Upsample { x, r }, rg)
    }

    /// Windowed multi-head cross attention for one head group.
    ///
    /// `q`, `k`, `v` are `[tokens, dim]` projections; the result is
    /// `[tokens, heads * head_dim]` in the original token order.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, spec: WindowSpec) -> Result<Var> {
        let sq = self.nodes[q.0].shape.clone();
        for o in [k, v] {
            if self.nodes[o.0].shape != sq {
                return Err(DiffError::ShapeMismatch {
                    op: "window_attention",
                    lhs: sq,
                    rhs: self.nodes[o.0].shape.clone(),
                });
            }
        }
        let tokens = spec.grid_h * spec.grid_w;
        let bad = sq.len() != 2
            || sq[0] != tokens
            || spec.window == 0
            || spec.grid_h % spec.window != 0
            || spec.grid_w % spec.window != 0
            || spec.shift >= spec.window.max(1)
            || (spec.head_start + spec.heads) * spec.head_dim > sq[1];
        if bad {
            return Err(DiffError::InvalidShape {
                op: "window_attention",
                shape: sq,
                reason: format!("{spec:?}"),
            });
        }
        let dim = sq[1];
        let (value, probs) = kernels::window_attention_forward(
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
            dim,
            &spec,
        );
        let rg = self.rg(&[q, k, v]);
        self.push(
            "window_attention",
            vec![tokens, spec.heads * spec.head_dim],
            value,
            Op::WindowAttention { q, k, v, spec, probs },
            rg,
        )
    }

    /// Attention probabilities `[windows, heads, n, n]` saved by a
    /// `window_attention` node (empty for nodes that do not need gradients).
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::WindowAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates d(loss)/d(node) into every reachable node that
    /// requires a gradient. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(DiffError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        {
            let n = &mut self.nodes[loss.0];
            if n.grad.is_empty() {
                n.grad = vec![T::zero()];
            }
            n.grad[0] += T::one();
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || node.grad.is_empty() || matches!(node.op, Op::Leaf) {
                continue;
            }
            let deltas = backward_op(before, node);
            for (v, d) in deltas {
                let target = &mut before[v.0];
                if !target.requires_grad {
                    continue;
                }
                if target.grad.is_empty() {
                    target.grad = d;
                } else {
                    for (g, x) in target.grad.iter_mut().zip(d) {
                        *g += x;
                    }
                }
            }
        }
        Ok(())
    }

    /// Clears every node gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.clear();
        }
    }
}

fn reduce_to<T: Real>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (i, &v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

fn backward_op<T: Real>(nodes: &[Node<T>], node: &Node<T>) -> Vec<(Var, Vec<T>)> {
    let g = &node.grad;
    let need = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| nodes[v.0].value.as_slice();
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            if need(*a) {
                out.push((*a, g.clone()));
            }
            if need(*b) {
                let mut d = reduce_to(g, val(*b).len().max(1));
                if matches!(node.op, Op::Sub(..)) {
                    d.iter_mut().for_each(|x| *x = -*x);
                }
                out.push((*b, d));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let nb = bv.len().max(1);
            if need(*a) {
                out.push((*a, g.iter().enumerate().map(|(i, &x)| x * bv[i % nb]).collect()));
            }
            if need(*b) {
                let prod: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                out.push((*b, reduce_to(&prod, nb)));
            }
        }
        Op::Scale(a, c) => out.push((*a, g.iter().map(|&x| x * *c).collect())),
        Op::AddConst(a) | Op::Reshape(a) => out.push((*a, g.clone())),
        Op::MulScalar(a, s) => {
            let c = val(*s)[0];
            if need(*a) {
                out.push((*a, g.iter().map(|&x| x * c).collect()));
            }
            if need(*s) {
                let d: T = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).sum();
                out.push((*s, vec![d]));
            }
        }
        Op::Abs(a) => {
            let d = g
                .iter()
                .zip(val(*a))
                .map(|(&x, &v)| if v > T::zero() { x } else if v < T::zero() { -x } else { T::zero() })
                .collect();
            out.push((*a, d));
        }
        Op::Gelu(a) => out.push((*a, g.iter().zip(val(*a)).map(|(&x, &v)| x * gelu_grad(v)).collect())),
        Op::Sigmoid(a) => {
            let d = g.iter().zip(&node.value).map(|(&x, &s)| x * s * (T::one() - s)).collect();
            out.push((*a, d));
        }
        Op::MatMul(a, b) => {
            let sb = &nodes[b.0].shape;
            let (k, n) = (sb[0], sb[1]);
            let m = val(*a).len() / k.max(1);
            if need(*a) {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, val(*b), true, T::zero(), &mut da);
                out.push((*a, da));
            }
            if need(*b) {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, val(*a), true, g, false, T::zero(), &mut db);
                out.push((*b, db));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let mut d = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g[j * r + i];
                }
            }
            out.push((*a, d));
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let (dx, dw, db) = kernels::conv2d_backward(g, cols, val(*w), geom, need(*x));
            if let Some(dx) = dx {
                out.push((*x, dx));
            }
            out.push((*w, dw));
            if let Some(b) = b {
                out.push((*b, db));
            }
        }
        Op::Depthwise { x, w, b } => {
            let s = &nodes[x.0].shape;
            let (dx, dw, db) = kernels::depthwise_backward(g, val(*x), (s[0], s[1], s[2]), val(*w));
            out.push((*x, dx));
            out.push((*w, dw));
            if let Some(b) = b {
                out.push((*b, db));
            }
        }
        Op::Slice { x, axis, start } => {
            let s = &nodes[x.0].shape;
            let (outer, n, inner) = split_axis(s, *axis);
            let len = node.shape[*axis];
            let mut d = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            out.push((*x, d));
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &v in xs {
                let n = nodes[v.0].shape[*axis];
                if need(v) {
                    let mut d = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + n * inner]);
                    }
                    out.push((v, d));
                }
                offset += n;
            }
        }
        Op::Softmax(x) => {
            let n = *node.shape.last().unwrap();
            let mut d = vec![T::zero(); g.len()];
            for ((dr, gr), yr) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(node.value.chunks_exact(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for i in 0..n {
                    dr[i] = yr[i] * (gr[i] - dot);
                }
            }
            out.push((*x, d));
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = *node.shape.last().unwrap();
            let gv = val(*gamma);
            let rows = g.len() / c;
            let mut dx = vec![T::zero(); g.len()];
            let mut dg = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let inv_c = T::one() / T::from_usize(c);
            let mut dxh = vec![T::zero(); c];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for i in 0..c {
                    dg[i] += gr[i] * hr[i];
                    dbeta[i] += gr[i];
                    dxh[i] = gr[i] * gv[i];
                    m1 += dxh[i];
                    m2 += dxh[i] * hr[i];
                }
                m1 *= inv_c;
                m2 *= inv_c;
                for i in 0..c {
                    dx[r * c + i] = rstd[r] * (dxh[i] - m1 - hr[i] * m2);
                }
            }
            out.push((*x, dx));
            out.push((*gamma, dg));
            out.push((*beta, dbeta));
        }
        Op::SumAll(x) => out.push((*x, vec![g[0]; val(*x).len()])),
        Op::MeanAll(x) => {
            let n = val(*x).len();
            out.push((*x, vec![g[0] / T::from_usize(n.max(1)); n]));
        }
        Op::SumAxis { x, axis, mean } => {
            let (outer, n, inner) = split_axis(&nodes[x.0].shape, *axis);
            let f = if *mean { T::one() / T::from_usize(n.max(1)) } else { T::one() };
            let mut d = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        d[(o * n + k) * inner + i] = g[o * inner + i] * f;
                    }
                }
            }
            out.push((*x, d));
        }
        Op::PixelShuffle { x, r } => {
            let (ho, wo, co) = (node.shape[0], node.shape[1], node.shape[2]);
            let (h, w) = (ho / r, wo / r);
            let mut d = vec![T::zero(); g.len()];
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..co {
                        d[kernels::shuffle_index((h, w, co), *r, oy, ox, ch)] = g[(oy * wo + ox) * co + ch];
                    }
                }
            }
            out.push((*x, d));
        }
        Op::PixelUnshuffle { x, r } => {
            let (ho, wo, co) = {
                let s = &nodes[x.0].shape;
                (s[0], s[1], s[2])
            };
            let (h, w) = (ho / r, wo / r);
            let mut d = vec![T::zero(); g.len()];
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..co {
                        d[(oy * wo + ox) * co + ch] = g[kernels::shuffle_index((h, w, co), *r, oy, ox, ch)];
                    }
                }
            }
            out.push((*x, d));
        }
        Op::Upsample { x, r } => {
            let s = &nodes[x.0].shape;
            let (w, c) = (s[1], s[2]);
            let (ho, wo) = (node.shape[0], node.shape[1]);
            let mut d = vec![T::zero(); val(*x).len()];
            for oy in 0..ho {
                for ox in 0..wo {
                    let src = ((oy / r) * w + ox / r) * c;
                    let go = &g[(oy * wo + ox) * c..][..c];
                    for ch in 0..c {
                        d[src + ch] += go[ch];
                    }
                }
            }
            out.push((*x, d));
        }
        Op::WindowAttention { q, k, v, spec, probs } => {
            let dim = nodes[q.0].shape[1];
            let (dq, dk, dv) = kernels::window_attention_backward(g, val(*q), val(*k), val(*v), probs, dim, spec);
            out.push((*q, dq));
            out.push((*k, dk));
            out.push((*v, dv));
        }
    }
    out
}
