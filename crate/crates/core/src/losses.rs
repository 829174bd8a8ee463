//! Training objectives.
//!
//! `img_loss = λp · mean((I_HR - I)²) + λg · mean(|∇I_HR - ∇I|)`, where `∇`
//! stacks forward differences along x and y. A branch sums `img_loss` over
//! its refinement steps; the modulation module is restrained by the
//! unit-weighted `img_loss`; the total weights the three terms.

use alloc::vec;

use crate::diff::{DiffError, Graph, Result, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Pixel (squared error) term of `img_loss`.
    pub pixel: f64,
    /// Gradient-profile (absolute error) term of `img_loss`.
    pub gradient: f64,
    /// Modulation-module loss in the total.
    pub cmm: f64,
    /// Graphic-branch loss in the total.
    pub graphic: f64,
    /// Structure-branch loss in the total.
    pub structure: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 1.0,
            gradient: 1.0,
            cmm: 1.0,
            graphic: 1.0,
            structure: 1.0,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        [self.pixel, self.gradient, self.cmm, self.graphic, self.structure]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }
}

fn image_dims<T: Real>(g: &Graph<T>, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [h, w, c] if h > 0 && w > 0 => Ok((h, w, c)),
        _ => Err(DiffError::InvalidShape {
            op: "image_grad",
            shape: g.shape(x).to_vec(),
            reason: "expected a non-empty HxWxC image".into(),
        }),
    }
}

/// Forward differences `[2, H, W, C]`: index 0 along x, index 1 along y,
/// zero in the last column / row.
pub fn image_grad<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (h, w, c) = image_dims(g, x)?;
    let diff_along = |g: &mut Graph<T>, axis: usize, len: usize| -> Result<Var> {
        let mut edge_shape = vec![h, w, c];
        edge_shape[axis] = 1;
        let edge = g.input(Tensor::zeros(&edge_shape));
        if len == 1 {
            return Ok(edge);
        }
        let hi = g.slice(x, axis, 1, len - 1)?;
        let lo = g.slice(x, axis, 0, len - 1)?;
        let d = g.sub(hi, lo)?;
        g.concat(&[d, edge], axis)
    };
    let dx = diff_along(g, 1, w)?;
    let dy = diff_along(g, 0, h)?;
    let dx = g.reshape(dx, &[1, h, w, c])?;
    let dy = g.reshape(dy, &[1, h, w, c])?;
    g.concat(&[dx, dy], 0)
}

/// Weighted pixel + gradient-profile loss of `pred` against `target`.
pub fn img_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, w: &LossWeights) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(DiffError::ShapeMismatch {
            op: "img_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let pix = g.mean(sq)?;
    let gp = image_grad(g, pred)?;
    let gt = image_grad(g, target)?;
    let gd = g.sub(gp, gt)?;
    let ga = g.abs(gd)?;
    let gpl = g.mean(ga)?;
    let pix = g.scale(pix, w.pixel)?;
    let gpl = g.scale(gpl, w.gradient)?;
    g.add(pix, gpl)
}

/// Sum of `img_loss` over a branch's intermediate images.
pub fn branch_loss<T: Real>(g: &mut Graph<T>, steps: &[Var], target: Var, w: &LossWeights) -> Result<Var> {
    let (first, rest) = steps.split_first().ok_or_else(|| DiffError::InvalidShape {
        op: "branch_loss",
        shape: vec![0],
        reason: "a branch has at least one step".into(),
    })?;
    let mut acc = img_loss(g, *first, target, w)?;
    for &s in rest {
        let l = img_loss(g, s, target, w)?;
        acc = g.add(acc, l)?;
    }
    Ok(acc)
}

/// Modulation-module loss: `img_loss` with unit pixel and gradient weights.
pub fn cmm_loss<T: Real>(g: &mut Graph<T>, fused: Var, target: Var) -> Result<Var> {
    img_loss(g, fused, target, &LossWeights::default())
}

/// `λC · cmm + λG · graphic + λS · structure`; an absent branch contributes
/// nothing.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    cmm: Var,
    graphic: Option<Var>,
    structure: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut acc = g.scale(cmm, w.cmm)?;
    for (term, lambda) in [(graphic, w.graphic), (structure, w.structure)] {
        if let Some(t) = term {
            let t = g.scale(t, lambda)?;
            acc = g.add(acc, t)?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{gradcheck, GradcheckOptions, ParamStore};
    use crate::rng::Rng;
    use alloc::vec::Vec;

    fn rand_img(rng: &mut Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, c], |_| rng.uniform())
    }

    fn naive_grad(x: &Tensor<f64>) -> Vec<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; 2 * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let i = (y * w + xx) * c + ch;
                    if xx + 1 < w {
                        out[i] = x.at(y, xx + 1, ch) - x.at(y, xx, ch);
                    }
                    if y + 1 < h {
                        out[h * w * c + i] = x.at(y + 1, xx, ch) - x.at(y, xx, ch);
                    }
                }
            }
        }
        out
    }

    fn naive_img_loss(a: &Tensor<f64>, b: &Tensor<f64>, wp: f64, wg: f64) -> f64 {
        let n = a.len() as f64;
        let pix: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let (ga, gb) = (naive_grad(a), naive_grad(b));
        let gp: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ga.len() as f64;
        wp * pix + wg * gp
    }

    fn eval_loss(a: &Tensor<f64>, b: &Tensor<f64>, w: &LossWeights) -> f64 {
        let mut g = Graph::new();
        let (x, y) = (g.input(a.clone()), g.input(b.clone()));
        let l = img_loss(&mut g, x, y, w).unwrap();
        g.scalar(l)
    }

    #[test]
    fn image_grad_matches_naive_differencing() {
        let mut rng = Rng::new(1);
        for (h, w, c) in [(4, 5, 3), (1, 6, 2), (7, 1, 1), (1, 1, 3)] {
            let img = rand_img(&mut rng, h, w, c);
            let mut g = Graph::new();
            let x = g.input(img.clone());
            let d = image_grad(&mut g, x).unwrap();
            assert_eq!(g.shape(d), &[2, h, w, c]);
            assert_eq!(g.value(d), naive_grad(&img).as_slice());
        }
    }

    #[test]
    fn image_grad_of_constant_and_ramp() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[4, 6, 2], 0.7));
        let d = image_grad(&mut g, x).unwrap();
        assert!(g.value(d).iter().all(|&v| v == 0.0));

        let ramp = Tensor::from_fn(&[4, 6, 1], |i| 0.125 * (i % 6) as f64);
        let x = g.input(ramp);
        let d = image_grad(&mut g, x).unwrap();
        let d = g.tensor(d);
        for y in 0..4 {
            for xx in 0..5 {
                assert_eq!(d.data()[y * 6 + xx], 0.125);
            }
        }
        assert!(d.data()[24..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn img_loss_cases() {
        let mut rng = Rng::new(2);
        let a = rand_img(&mut rng, 4, 4, 3);
        let w = LossWeights::default();
        assert_eq!(eval_loss(&a, &a, &w), 0.0);
        let shifted = a.map(|v| v + 0.25);
        let w2 = LossWeights {
            pixel: 3.0,
            ..w
        };
        assert!((eval_loss(&shifted, &a, &w2) - 3.0 * 0.0625).abs() < 1e-15);
        let b = rand_img(&mut rng, 4, 4, 3);
        for (wp, wg) in [(1.0, 1.0), (0.3, 2.0), (0.0, 1.0)] {
            let w = LossWeights {
                pixel: wp,
                gradient: wg,
                ..w
            };
            assert!((eval_loss(&a, &b, &w) - naive_img_loss(&a, &b, wp, wg)).abs() < 1e-12);
        }
    }

    #[test]
    fn img_loss_rejects_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[4, 4, 3]));
        let b = g.input(Tensor::zeros(&[4, 4, 1]));
        assert!(img_loss(&mut g, a, b, &LossWeights::default()).is_err());
    }

    #[test]
    fn branch_and_total_losses() {
        let mut rng = Rng::new(3);
        let hr = rand_img(&mut rng, 4, 6, 3);
        let steps: Vec<_> = (0..3).map(|_| rand_img(&mut rng, 4, 6, 3)).collect();
        let w = LossWeights {
            pixel: 0.7,
            gradient: 1.3,
            ..Default::default()
        };
        let mut g = Graph::new();
        let t = g.input(hr.clone());
        let vs: Vec<_> = steps.iter().map(|s| g.input(s.clone())).collect();
        let one = branch_loss(&mut g, &vs[..1], t, &w).unwrap();
        assert_eq!(g.scalar(one), eval_loss(&steps[0], &hr, &w));
        let all = branch_loss(&mut g, &vs, t, &w).unwrap();
        let oracle: f64 = steps.iter().map(|s| naive_img_loss(s, &hr, 0.7, 1.3)).sum();
        assert!((g.scalar(all) - oracle).abs() < 1e-12);
        let dup = branch_loss(&mut g, &[vs[1], vs[1], vs[1]], t, &w).unwrap();
        assert!((g.scalar(dup) - 3.0 * eval_loss(&steps[1], &hr, &w)).abs() < 1e-12);
        assert!(branch_loss(&mut g, &[], t, &w).is_err());

        let c = cmm_loss(&mut g, vs[2], t).unwrap();
        assert!((g.scalar(c) - naive_img_loss(&steps[2], &hr, 1.0, 1.0)).abs() < 1e-12);
        let plain = total_loss(&mut g, c, Some(one), Some(all), &LossWeights::default()).unwrap();
        assert!((g.scalar(plain) - (g.scalar(c) + g.scalar(one) + g.scalar(all))).abs() < 1e-12);
        let cmm_only = LossWeights {
            graphic: 0.0,
            structure: 0.0,
            ..Default::default()
        };
        let only = total_loss(&mut g, c, Some(one), Some(all), &cmm_only).unwrap();
        assert_eq!(g.scalar(only), g.scalar(c));
        // linear in each lambda
        let lam = |lc: f64, lg: f64, ls: f64, g: &mut Graph<f64>| {
            let w = LossWeights {
                cmm: lc,
                graphic: lg,
                structure: ls,
                ..Default::default()
            };
            let v = total_loss(g, c, Some(one), Some(all), &w).unwrap();
            g.scalar(v)
        };
        let base = lam(1.0, 2.0, 0.5, &mut g);
        let bumped = lam(1.0, 4.0, 0.5, &mut g);
        assert!((bumped - base - 2.0 * g.scalar(one)).abs() < 1e-12);
    }

    #[test]
    fn losses_pass_gradcheck() {
        let mut rng = Rng::new(4);
        let hr = rand_img(&mut rng, 5, 6, 3);
        let mut s = ParamStore::new();
        for name in ["a", "b", "m"] {
            s.add(name, rand_img(&mut rng, 5, 6, 3));
        }
        let w = LossWeights {
            pixel: 0.8,
            gradient: 1.2,
            cmm: 1.0,
            graphic: 0.5,
            structure: 2.0,
        };
        let report = gradcheck(&mut s, &GradcheckOptions::default(), |g, s| {
            let t = g.input(hr.clone());
            let ids: Vec<_> = ["a", "b", "m"].iter().map(|n| s.find(n).unwrap()).collect();
            let (a, b, m) = (g.param(s, ids[0]), g.param(s, ids[1]), g.param(s, ids[2]));
            let bg = branch_loss(g, &[a, b], t, &w)?;
            let bs = branch_loss(g, &[b], t, &w)?;
            let c = cmm_loss(g, m, t)?;
            total_loss(g, c, Some(bg), Some(bs), &w)
        })
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn gradient_term_ignores_global_offsets() {
        let mut rng = Rng::new(5);
        let (a, b) = (rand_img(&mut rng, 4, 4, 3), rand_img(&mut rng, 4, 4, 3));
        let gp_only = LossWeights {
            pixel: 0.0,
            ..Default::default()
        };
        let base = eval_loss(&a, &b, &gp_only);
        let shifted = eval_loss(&a.map(|v| v + 0.3), &b.map(|v| v - 0.1), &gp_only);
        assert!((base - shifted).abs() < 1e-12);
    }
}
