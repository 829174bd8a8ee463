use alloc::format;

use super::attention::WindowCrossAttention;
use super::layers::{Conv, LayerNorm, Linear};
use super::{NetConfig, NetError};
use crate::diff::{DiffError, Graph, ParamId, ParamStore, Result, Var};
use crate::priors::PriorKind;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Token MLP with a depthwise 3x3 convolution between its two linears.
#[derive(Clone, Debug)]
pub struct Leff {
    pub fc1: Linear,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub fc2: Linear,
}

impl Leff {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, dim: usize, hidden: usize) -> Self {
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden);
        let dw_w = store.add(
            &format!("{name}.dw.w"),
            crate::diff::init_uniform_fan_in(rng, &[3, 3, hidden], 9),
        );
        let dw_b = store.add(&format!("{name}.dw.b"), Tensor::zeros(&[hidden]));
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim);
        Self { fc1, dw_w, dw_b, fc2 }
    }

    /// `tokens`: `[grid_h * grid_w, dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let h = self.fc1.forward(g, s, tokens)?;
        let h = g.gelu(h)?;
        let hidden = g.shape(h)[1];
        let h = g.reshape(h, &[grid.0, grid.1, hidden])?;
        let (w, b) = (g.param(s, self.dw_w), g.param(s, self.dw_b));
        let h = g.depthwise3x3(h, w, Some(b))?;
        let h = g.gelu(h)?;
        let h = g.reshape(h, &[grid.0 * grid.1, hidden])?;
        self.fc2.forward(g, s, h)
    }
}

/// One attention stage: `F~ = MCA(LN(P), LN(X)) + LN(X)`, then
/// `F = F~ + LeFF(LN(F~))`.
#[derive(Clone, Debug)]
pub struct Stage {
    pub ln_prior: LayerNorm,
    pub ln_image: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub attn: WindowCrossAttention,
    pub leff: Leff,
}

impl Stage {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cfg: &NetConfig, shifted: bool) -> Self {
        let d = cfg.embed_dim;
        Self {
            ln_prior: LayerNorm::new(store, &format!("{name}.ln_p"), d),
            ln_image: LayerNorm::new(store, &format!("{name}.ln_i"), d),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_f"), d),
            attn: WindowCrossAttention::new(
                store,
                rng,
                &format!("{name}.attn"),
                d,
                cfg.heads,
                &cfg.window_sizes,
                shifted,
                cfg.dynamic_gate,
            ),
            leff: Leff::new(store, rng, &format!("{name}.leff"), d, cfg.ffn_mult * d),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        prior: Var,
        image: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let p = self.ln_prior.forward(g, s, prior)?;
        let x = self.ln_image.forward(g, s, image)?;
        let a = self.attn.forward(g, s, p, x, grid)?;
        let f = g.add(a, x)?;
        let n = self.ln_ffn.forward(g, s, f)?;
        let l = self.leff.forward(g, s, n, grid)?;
        g.add(f, l)
    }
}

/// Prior-guided refinement: embed image and prior, two cross-attention
/// stages (plain then shifted windows), conv tail, pixel shuffle, sigmoid.
#[derive(Clone, Debug)]
pub struct Pgrm {
    pub kind: PriorKind,
    /// Channel matching of multi-channel priors to 3 channels.
    pub prior_match: Option<Conv>,
    pub prior_embed: Conv,
    pub image_embed: Conv,
    pub stage1: Stage,
    pub stage2: Stage,
    pub tail1: Conv,
    pub tail2: Conv,
    pub patch: usize,
    pub embed_dim: usize,
}

impl Pgrm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cfg: &NetConfig, kind: PriorKind) -> Self {
        let (d, p) = (cfg.embed_dim, cfg.patch);
        let prior_match = match kind {
            PriorKind::Structure => None,
            k => Some(Conv::same3(store, rng, &format!("{name}.prior_match"), k.channels(), 3)),
        };
        Self {
            kind,
            prior_match,
            prior_embed: Conv::new(store, rng, &format!("{name}.prior_embed"), p, 3, d, p, 0),
            image_embed: Conv::new(store, rng, &format!("{name}.image_embed"), p, 3, d, p, 0),
            stage1: Stage::new(store, rng, &format!("{name}.s1"), cfg, false),
            stage2: Stage::new(store, rng, &format!("{name}.s2"), cfg, true),
            tail1: Conv::same3(store, rng, &format!("{name}.tail1"), d, d),
            tail2: Conv::same3(store, rng, &format!("{name}.tail2"), d, 3 * p * p),
            patch: p,
            embed_dim: d,
        }
    }

    /// Patch embedding to `[grid_h * grid_w, D]`.
    fn embed<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, conv: &Conv, x: Var) -> Result<(Var, (usize, usize))> {
        let (h, w) = (g.shape(x)[0], g.shape(x)[1]);
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(DiffError::InvalidShape {
                op: "patch_embed",
                shape: g.shape(x).to_vec(),
                reason: format!("spatial dims not divisible by patch {}", self.patch),
            });
        }
        let grid = (h / self.patch, w / self.patch);
        let t = conv.forward(g, s, x)?;
        Ok((g.reshape(t, &[grid.0 * grid.1, self.embed_dim])?, grid))
    }

    /// Prior tokens; a 1-channel mask is replicated to 3 channels first.
    pub fn embed_prior<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, prior: &Tensor<T>) -> Result<(Var, (usize, usize))> {
        let x = match &self.prior_match {
            None => g.input(prior.expand_channels(3)),
            Some(c) => {
                let p = g.input(prior.clone());
                c.forward(g, s, p)?
            }
        };
        self.embed(g, s, &self.prior_embed, x)
    }

    pub fn embed_image<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, image: Var) -> Result<(Var, (usize, usize))> {
        self.embed(g, s, &self.image_embed, image)
    }

    /// `image`: `[2h, 2w, 3]` node; `prior`: the constant prior tensor.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, image: Var, prior: &Tensor<T>) -> Result<Var, NetError> {
        let expect = self.kind.channels();
        if prior.shape().len() != 3 || prior.shape()[2] != expect || prior.shape()[..2] != g.shape(image)[..2] {
            return Err(NetError::Shape(format!(
                "prior {:?} does not match image {:?} with {expect} channels",
                prior.shape(),
                g.shape(image)
            )));
        }
        let (pt, grid) = self.embed_prior(g, s, prior)?;
        let (it, _) = self.embed_image(g, s, image)?;
        let f1 = self.stage1.forward(g, s, pt, it, grid)?;
        let f2 = self.stage2.forward(g, s, pt, f1, grid)?;
        let f = g.reshape(f2, &[grid.0, grid.1, self.embed_dim])?;
        let f = self.tail1.forward(g, s, f)?;
        let f = g.gelu(f)?;
        let f = self.tail2.forward(g, s, f)?;
        let f = g.pixel_shuffle(f, self.patch)?;
        Ok(g.sigmoid(f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{gradcheck, GradcheckOptions};
    use crate::net::NetConfig;

    fn rand(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
    }

    #[test]
    fn leff_on_zero_input_is_spatially_uniform_inside() {
        let mut rng = Rng::new(1);
        let mut s = ParamStore::<f64>::new();
        let leff = Leff::new(&mut s, &mut rng, "l", 4, 16);
        for id in [leff.fc1.b, leff.dw_b, leff.fc2.b] {
            for v in s.get_mut(id).value.data_mut() {
                *v = rng.uniform_in(-1.0, 1.0);
            }
        }
        let mut g = Graph::inference();
        let x = g.input(Tensor::zeros(&[6 * 8, 4]));
        let y = leff.forward(&mut g, &s, x, (6, 8)).unwrap();
        let y = g.tensor(y);
        assert_eq!(y.shape(), &[48, 4]);
        // interior tokens see the full 3x3 neighbourhood, hence identical
        let first = &y.data()[(8 + 1) * 4..][..4];
        for yy in 1..5 {
            for xx in 1..7 {
                assert_eq!(&y.data()[(yy * 8 + xx) * 4..][..4], first);
            }
        }
    }

    #[test]
    fn leff_with_delta_kernel_and_identity_linears_is_double_gelu() {
        let mut rng = Rng::new(2);
        let mut s = ParamStore::<f64>::new();
        let d = 3;
        let leff = Leff::new(&mut s, &mut rng, "l", d, d);
        for l in [&leff.fc1, &leff.fc2] {
            let w = &mut s.get_mut(l.w).value;
            for i in 0..d {
                for j in 0..d {
                    w.data_mut()[i * d + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        let k = &mut s.get_mut(leff.dw_w).value;
        for (i, v) in k.data_mut().iter_mut().enumerate() {
            *v = if i / d == 4 { 1.0 } else { 0.0 };
        }
        let x = rand(&mut rng, &[4 * 5, d], -2.0, 2.0);
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let y = leff.forward(&mut g, &s, xv, (4, 5)).unwrap();
        let y = g.tensor(y);
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / core::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - gelu(gelu(*b))).abs() < 1e-12);
        }
    }

    fn toy_cfg() -> NetConfig {
        NetConfig {
            embed_dim: 12,
            heads: 6,
            window_sizes: alloc::vec![2, 4, 8],
            image_size: (16, 64),
            ..NetConfig::default()
        }
    }

    #[test]
    fn pgrm_maps_image_and_prior_to_unit_interval_image() {
        let mut rng = Rng::new(3);
        let cfg = NetConfig::default();
        let mut s = ParamStore::<f32>::new();
        for kind in [PriorKind::Graphic, PriorKind::Structure, PriorKind::Concat] {
            let pg = Pgrm::new(&mut s, &mut rng, &format!("{kind:?}"), &cfg, kind);
            let img = Tensor::from_fn(&[32, 128, 3], |_| rng.uniform() as f32);
            let prior = Tensor::from_fn(&[32, 128, kind.channels()], |_| (rng.uniform() < 0.3) as u8 as f32);
            let mut g = Graph::inference();
            let x = g.input(img);
            let (pt, grid) = pg.embed_prior(&mut g, &s, &prior).unwrap();
            assert_eq!((g.shape(pt), grid), (&[16 * 64, 48][..], (16, 64)));
            let y = pg.forward(&mut g, &s, x, &prior).unwrap();
            assert_eq!(g.shape(y), &[32, 128, 3]);
            assert!(g.value(y).iter().all(|&v| v > 0.0 && v < 1.0));
            let wrong = Tensor::zeros(&[32, 128, 4]);
            assert!(pg.forward(&mut g, &s, x, &wrong).is_err());
        }
    }

    #[test]
    fn zero_image_embeds_to_bias() {
        let mut rng = Rng::new(4);
        let cfg = toy_cfg();
        let mut s = ParamStore::<f64>::new();
        let pg = Pgrm::new(&mut s, &mut rng, "p", &cfg, PriorKind::Structure);
        for v in s.get_mut(pg.image_embed.b).value.data_mut() {
            *v = rng.uniform();
        }
        let bias = s.get(pg.image_embed.b).value.data().to_vec();
        let mut g = Graph::inference();
        let x = g.input(Tensor::zeros(&[16, 64, 3]));
        let (t, _) = pg.embed_image(&mut g, &s, x).unwrap();
        assert!(g.value(t).chunks_exact(12).all(|row| row == bias.as_slice()));
        let odd = g.input(Tensor::zeros(&[15, 64, 3]));
        assert!(pg.embed_image(&mut g, &s, odd).is_err());
    }

    #[test]
    fn pgrm_passes_gradcheck_on_toy_grid() {
        let mut rng = Rng::new(5);
        let cfg = toy_cfg();
        let mut s = ParamStore::<f64>::new();
        let pg = Pgrm::new(&mut s, &mut rng, "p", &cfg, PriorKind::Graphic);
        let img = rand(&mut rng, &[16, 64, 3], 0.0, 1.0);
        let hr = rand(&mut rng, &[16, 64, 3], 0.0, 1.0);
        let prior = Tensor::from_fn(&[16, 64, 2], |_| (rng.uniform() < 0.3) as u8 as f64);
        let opts = GradcheckOptions {
            max_entries: Some(6),
            abs_floor: 1e-5,
            ..Default::default()
        };
        let report = gradcheck(&mut s, &opts, |g, s| {
            let x = g.input(img.clone());
            let t = g.input(hr.clone());
            let y = pg.forward(g, s, x, &prior).map_err(|e| e.into_diff())?;
            crate::losses::img_loss(g, y, t, &crate::losses::LossWeights::default())
        })
        .unwrap();
        assert!(report.passed(), "{:#?}", report.params.iter().filter(|p| p.max_rel_err > 1e-4 || p.non_finite).collect::<alloc::vec::Vec<_>>());
    }
}
