use alloc::format;
use alloc::vec::Vec;

use super::layers::Linear;
use crate::diff::{Graph, ParamStore, Result, Var, WindowSpec};
use crate::real::Real;
use crate::rng::Rng;

/// Pool -> shared two-layer MLP -> softmax over window branches.
#[derive(Clone, Debug)]
pub struct WindowGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Multi-scale windowed cross attention: queries from the prior tokens,
/// keys and values from the image tokens. Heads are split evenly over the
/// window sizes; in the shifted variant each branch rolls the grid by half
/// its window before partitioning.
#[derive(Clone, Debug)]
pub struct WindowCrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub gate: Option<WindowGate>,
    pub windows: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub shifted: bool,
}

impl WindowCrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        windows: &[usize],
        shifted: bool,
        gated: bool,
    ) -> Self {
        let lin = |store: &mut ParamStore<T>, rng: &mut Rng, n: &str, a, b| Linear::new(store, rng, &format!("{name}.{n}"), a, b);
        let wq = lin(store, rng, "wq", dim, dim);
        let wk = lin(store, rng, "wk", dim, dim);
        let wv = lin(store, rng, "wv", dim, dim);
        let wo = lin(store, rng, "wo", dim, dim);
        let branch_dim = dim / windows.len();
        let gate = (gated && windows.len() > 1).then(|| WindowGate {
            fc1: lin(store, rng, "gate1", branch_dim, branch_dim),
            fc2: lin(store, rng, "gate2", branch_dim, 1),
        });
        Self {
            wq,
            wk,
            wv,
            wo,
            gate,
            windows: windows.to_vec(),
            heads,
            head_dim: dim / heads,
            shifted,
        }
    }

    pub fn spec(&self, branch: usize, grid: (usize, usize)) -> WindowSpec {
        let w = self.windows[branch];
        let per = self.heads / self.windows.len();
        WindowSpec {
            grid_h: grid.0,
            grid_w: grid.1,
            window: w,
            shift: if self.shifted { w / 2 } else { 0 },
            head_dim: self.head_dim,
            head_start: branch * per,
            heads: per,
        }
    }

    /// `q_tokens`, `kv_tokens`: `[grid_h * grid_w, dim]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        q_tokens: Var,
        kv_tokens: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let q = self.wq.forward(g, s, q_tokens)?;
        let k = self.wk.forward(g, s, kv_tokens)?;
        let v = self.wv.forward(g, s, kv_tokens)?;
        let mut outs = Vec::with_capacity(self.windows.len());
        for b in 0..self.windows.len() {
            outs.push(g.window_attention(q, k, v, self.spec(b, grid))?);
        }
        if let Some(gate) = &self.gate {
            let mut scores = Vec::with_capacity(outs.len());
            for &o in &outs {
                let pooled = g.mean_axis(o, 0)?;
                let h = gate.fc1.forward(g, s, pooled)?;
                let h = g.gelu(h)?;
                scores.push(gate.fc2.forward(g, s, h)?);
            }
            let scores = g.concat(&scores, 0)?;
            let weights = g.softmax(scores)?;
            let n = outs.len() as f64;
            let weights = g.scale(weights, n)?;
            for (b, o) in outs.iter_mut().enumerate() {
                let wb = g.slice(weights, 0, b, 1)?;
                *o = g.mul_scalar(*o, wb)?;
            }
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.wo.forward(g, s, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{gradcheck, GradcheckOptions};
    use crate::tensor::Tensor;
    use alloc::vec;

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
    }

    /// Dense softmax(QK^T / sqrt(d)) V over all tokens, one head.
    fn dense_attention(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                for c in 0..d {
                    out[i * d + c] += e[j] / z * v[j * d + c];
                }
            }
        }
        out
    }

    fn eval(att: &WindowCrossAttention, s: &ParamStore<f64>, q: &Tensor<f64>, kv: &Tensor<f64>, grid: (usize, usize)) -> Tensor<f64> {
        let mut g = Graph::inference();
        let (a, b) = (g.input(q.clone()), g.input(kv.clone()));
        let o = att.forward(&mut g, s, a, b, grid).unwrap();
        g.tensor(o)
    }

    #[test]
    fn full_window_single_head_equals_dense_attention() {
        let mut rng = Rng::new(1);
        let mut s = ParamStore::new();
        let (gh, gw, d) = (4, 4, 6);
        let att = WindowCrossAttention::new(&mut s, &mut rng, "a", d, 1, &[4], false, true);
        assert!(att.gate.is_none());
        let q = rand(&mut rng, &[16, d]);
        let kv = rand(&mut rng, &[16, d]);
        let got = eval(&att, &s, &q, &kv, (gh, gw));
        // oracle with the same projections
        let proj = |x: &Tensor<f64>, l: &Linear| -> Vec<f64> {
            let w = &s.get(l.w).value;
            let b = &s.get(l.b).value;
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let mut y = vec![0.0; 16 * dout];
            for t in 0..16 {
                for o in 0..dout {
                    y[t * dout + o] = b.data()[o] + (0..din).map(|i| x.data()[t * din + i] * w.data()[i * dout + o]).sum::<f64>();
                }
            }
            y
        };
        let (pq, pk, pv) = (proj(&q, &att.wq), proj(&kv, &att.wk), proj(&kv, &att.wv));
        let dense = Tensor::new(&[16, d], dense_attention(&pq, &pk, &pv, 16, d));
        let want = proj(&dense, &att.wo);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_queries_average_values_per_window() {
        let mut rng = Rng::new(2);
        let mut s = ParamStore::new();
        let d = 4;
        let att = WindowCrossAttention::new(&mut s, &mut rng, "a", d, 2, &[2], false, false);
        for v in s.get_mut(att.wq.w).value.data_mut() {
            *v = 0.0;
        }
        // identity value and output projections
        for l in [&att.wv, &att.wo] {
            let w = &mut s.get_mut(l.w).value;
            for i in 0..d {
                for j in 0..d {
                    w.data_mut()[i * d + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        let q = rand(&mut rng, &[8, d]);
        let kv = rand(&mut rng, &[8, d]);
        let got = eval(&att, &s, &q, &kv, (2, 4));
        for tok in 0..8 {
            let (y, x) = (tok / 4, tok % 4);
            let wx = x / 2 * 2;
            for c in 0..d {
                let mean = [(0, wx), (0, wx + 1), (1, wx), (1, wx + 1)]
                    .iter()
                    .map(|&(yy, xx)| kv.data()[(yy * 4 + xx) * d + c])
                    .sum::<f64>()
                    / 4.0;
                assert!((got.data()[tok * d + c] - mean).abs() < 1e-12, "tok {tok} ({y},{x})");
            }
        }
    }

    #[test]
    fn shifted_equals_plain_on_spatially_constant_inputs() {
        let mut rng = Rng::new(3);
        let mut s = ParamStore::new();
        let d = 12;
        let plain = WindowCrossAttention::new(&mut s, &mut rng, "p", d, 6, &[2, 4, 8], false, true);
        let mut shifted = plain.clone();
        shifted.shifted = true;
        let qrow = rand(&mut rng, &[d]);
        let kvrow = rand(&mut rng, &[d]);
        let q = Tensor::from_fn(&[8 * 16, d], |i| qrow.data()[i % d]);
        let kv = Tensor::from_fn(&[8 * 16, d], |i| kvrow.data()[i % d]);
        let a = eval(&plain, &s, &q, &kv, (8, 16));
        let b = eval(&shifted, &s, &q, &kv, (8, 16));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        let mut unit = plain.clone();
        unit.windows = vec![1, 1, 1];
        let mut unit_shift = unit.clone();
        unit_shift.shifted = true;
        assert_eq!(unit_shift.spec(0, (8, 16)).shift, 0);
        let q = rand(&mut rng, &[8 * 16, d]);
        assert_eq!(eval(&unit, &s, &q, &kv, (8, 16)), eval(&unit_shift, &s, &q, &kv, (8, 16)));
    }

    #[test]
    fn probabilities_are_normalized_and_masked() {
        let mut rng = Rng::new(4);
        let mut s = ParamStore::new();
        let d = 8;
        let att = WindowCrossAttention::new(&mut s, &mut rng, "a", d, 2, &[4], true, false);
        let q = rand(&mut rng, &[8 * 8, d]).map(|v| 3.0 * v);
        let kv = rand(&mut rng, &[8 * 8, d]).map(|v| 3.0 * v);
        let mut g = Graph::<f64>::new();
        let (qa, ka) = (g.input(q), g.input(kv));
        let (pq, pk, pv) = (
            att.wq.forward(&mut g, &s, qa).unwrap(),
            att.wk.forward(&mut g, &s, ka).unwrap(),
            att.wv.forward(&mut g, &s, ka).unwrap(),
        );
        let spec = att.spec(0, (8, 8));
        // make the node require grad so the probabilities are kept
        let pq = {
            let t = g.tensor(pq);
            g.leaf(t, true)
        };
        let o = g.window_attention(pq, pk, pv, spec).unwrap();
        let probs = g.attention_probs(o).unwrap();
        let n = spec.window_tokens();
        let (mut tok, mut region) = (vec![0; n], vec![0; n]);
        let mut masked = 0;
        for win in 0..spec.windows() {
            spec.window_tokens_of(win, &mut tok, &mut region);
            for h in 0..spec.heads {
                for i in 0..n {
                    let row = &probs[((win * spec.heads + h) * n + i) * n..][..n];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    for j in 0..n {
                        if region[i] != region[j] {
                            masked += 1;
                            assert!(row[j] < 1e-30);
                        }
                    }
                }
            }
        }
        assert!(masked > 0);
    }

    #[test]
    fn gated_attention_passes_gradcheck() {
        for shifted in [false, true] {
            let mut rng = Rng::new(5);
            let mut s = ParamStore::new();
            let att = WindowCrossAttention::new(&mut s, &mut rng, "a", 12, 6, &[2, 4, 8], shifted, true);
            let q = rand(&mut rng, &[8 * 16, 12]);
            let kv = rand(&mut rng, &[8 * 16, 12]);
            let w = rand(&mut rng, &[8 * 16, 12]);
            let opts = GradcheckOptions {
                max_entries: Some(24),
                ..Default::default()
            };
            let report = gradcheck(&mut s, &opts, |g, s| {
                let (a, b) = (g.input(q.clone()), g.input(kv.clone()));
                let o = att.forward(g, s, a, b, (8, 16))?;
                let wv = g.input(w.clone());
                let p = g.mul(o, wv)?;
                g.sum(p)
            })
            .unwrap();
            assert!(report.passed(), "{report:#?}");
        }
    }
}
