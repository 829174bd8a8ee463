use alloc::format;
use alloc::vec::Vec;

use super::cmm::Cmm;
use super::pgrm::Pgrm;
use super::psn::TinyPsn;
use super::{NetConfig, NetError};
use crate::diff::{Graph, ParamId, ParamStore, Var};
use crate::losses::{branch_loss, cmm_loss, total_loss, LossWeights};
use crate::priors::{prior_for, GlyphAtlas, PriorKind};
use crate::real::Real;
use crate::rng::Rng;
use crate::synth::bicubic_upsample2;
use crate::tensor::Tensor;

/// Name prefix of the baseline's parameters inside a shared store.
pub const PSN_PREFIX: &str = "psn.";

/// How the starting image `I_0` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PsnMode {
    /// Baseline evaluated outside the graph; no gradient reaches it.
    Frozen,
    /// Baseline evaluated inside the graph and trained jointly.
    Finetune,
    /// No baseline: bicubic upsampling of the input.
    Standalone,
}

impl PsnMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PsnMode::Frozen => "frozen",
            PsnMode::Finetune => "finetune",
            PsnMode::Standalone => "standalone",
        }
    }
}

impl core::str::FromStr for PsnMode {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        [PsnMode::Frozen, PsnMode::Finetune, PsnMode::Standalone]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| NetError::Config(format!("unknown train strategy `{s}`")))
    }
}

/// Per-call forward options.
#[derive(Clone, Copy, Debug)]
pub struct Forward<'a, T> {
    pub psn: PsnMode,
    /// Compute every prior from this image instead of the running estimate.
    pub oracle: Option<&'a Tensor<T>>,
    pub alpha: f64,
}

impl<T> Forward<'_, T> {
    pub fn frozen(alpha: f64) -> Self {
        Self {
            psn: PsnMode::Frozen,
            oracle: None,
            alpha,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DpmnOutput {
    pub i0: Var,
    /// Every intermediate image of every branch, in branch order.
    pub branches: Vec<(PriorKind, Vec<Var>)>,
    /// Modulation module output `I_M`.
    pub fused: Var,
    /// `alpha * I_M + (1 - alpha) * I_0`.
    pub out: Var,
}

/// Baseline plus refinement branches plus modulation module.
#[derive(Clone, Debug)]
pub struct Dpmn {
    pub cfg: NetConfig,
    pub psn: TinyPsn,
    pub branches: Vec<(PriorKind, Vec<Pgrm>)>,
    pub cmm: Cmm,
}

fn branch_tag(kind: PriorKind) -> &'static str {
    match kind {
        PriorKind::Graphic => "graphic",
        PriorKind::Structure => "structure",
        PriorKind::Concat => "concat",
    }
}

impl Dpmn {
    /// Registers every parameter in `store`; baseline parameters come
    /// first and carry [`PSN_PREFIX`].
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &NetConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let psn = TinyPsn::new(store, rng, "psn", cfg.psn_channels);
        let branches = cfg
            .branches
            .kinds()
            .into_iter()
            .map(|kind| {
                let tag = branch_tag(kind);
                let mods = (0..cfg.n_pgrm)
                    .map(|i| Pgrm::new(store, rng, &format!("{tag}.pgrm{i}"), cfg, kind))
                    .collect();
                (kind, mods)
            })
            .collect();
        let cmm = Cmm::new(store, rng, "cmm", cfg.cmm, cfg.cmm_base);
        Ok(Self {
            cfg: cfg.clone(),
            psn,
            branches,
            cmm,
        })
    }

    pub fn psn_ids<T: Real>(store: &ParamStore<T>) -> Vec<ParamId> {
        store.ids().filter(|&id| store.get(id).name.starts_with(PSN_PREFIX)).collect()
    }

    /// Freezes or unfreezes the baseline parameters only.
    pub fn set_psn_frozen<T: Real>(store: &mut ParamStore<T>, frozen: bool) {
        for id in Self::psn_ids(store) {
            store.get_mut(id).frozen = frozen;
        }
    }

    /// Baseline output for an `[h, w, 3]` input, computed outside any
    /// training graph.
    pub fn psn_infer<T: Real>(&self, s: &ParamStore<T>, lr: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut g = Graph::inference();
        let x = g.input(lr.clone());
        let y = self.psn.forward(&mut g, s, x)?;
        Ok(g.tensor(y))
    }

    fn start<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, lr: &Tensor<T>, mode: PsnMode) -> Result<Var, NetError> {
        Ok(match mode {
            PsnMode::Frozen => {
                let i0 = self.psn_infer(s, lr)?;
                g.input(i0)
            }
            PsnMode::Finetune => {
                let x = g.input(lr.clone());
                self.psn.forward(g, s, x)?
            }
            PsnMode::Standalone => g.input(bicubic_upsample2(&lr.cast::<f64>()).cast()),
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        atlas: &GlyphAtlas,
        lr: &Tensor<T>,
        opts: &Forward<'_, T>,
    ) -> Result<DpmnOutput, NetError> {
        let i0 = self.start(g, s, lr, opts.psn)?;
        let expect = [self.cfg.image_size.0, self.cfg.image_size.1, 3];
        if g.shape(i0) != expect {
            return Err(NetError::Shape(format!("start image {:?}, expected {expect:?}", g.shape(i0))));
        }
        let mut branches = Vec::with_capacity(self.branches.len());
        for (kind, mods) in &self.branches {
            let oracle = opts.oracle.map(|hr| prior_for(*kind, hr, atlas)).transpose()?;
            let mut prev = i0;
            let mut steps = Vec::with_capacity(mods.len());
            for m in mods {
                let prior = match &oracle {
                    Some(p) => p.clone(),
                    None => prior_for(*kind, &g.tensor(prev), atlas)?,
                };
                prev = m.forward(g, s, prev, &prior)?;
                steps.push(prev);
            }
            branches.push((*kind, steps));
        }
        let last = |b: &(PriorKind, Vec<Var>)| *b.1.last().expect("n_pgrm > 0");
        let (a, b) = match branches.as_slice() {
            [one] => (last(one), last(one)),
            [gr, st] => (last(gr), last(st)),
            _ => unreachable!("one or two branches"),
        };
        let fused = self.cmm.forward(g, s, a, b)?;
        let out = fuse(g, fused, i0, opts.alpha)?;
        Ok(DpmnOutput { i0, branches, fused, out })
    }

    /// Training objective. A lone branch is weighted as the graphic one.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, out: &DpmnOutput, hr: Var, w: &LossWeights) -> Result<Var, NetError> {
        let lc = cmm_loss(g, out.fused, hr)?;
        let mut terms = [None, None];
        for (kind, steps) in &out.branches {
            let l = branch_loss(g, steps, hr, w)?;
            let slot = if out.branches.len() == 1 || *kind != PriorKind::Structure { 0 } else { 1 };
            terms[slot] = Some(l);
        }
        Ok(total_loss(g, lc, terms[0], terms[1], w)?)
    }
}

/// `alpha * fused + (1 - alpha) * base`.
pub fn fuse<T: Real>(g: &mut Graph<T>, fused: Var, base: Var, alpha: f64) -> crate::diff::Result<Var> {
    let a = g.scale(fused, alpha)?;
    let b = g.scale(base, 1.0 - alpha)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::super::{Branches, CmmVariant};
    use super::*;
    use crate::diff::{gradcheck, GradcheckOptions};
    use crate::synth::{generate, DegradationConfig, SampleSpec, Split};
    use crate::metrics::Tier;
    use crate::priors::TextLabel;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            n_pgrm: 2,
            embed_dim: 6,
            heads: 3,
            ffn_mult: 2,
            cmm_base: 2,
            psn_channels: 4,
            ..NetConfig::default()
        }
    }

    fn sample(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let spec = SampleSpec {
            id: 0,
            label: TextLabel::new("DPMN42").unwrap(),
            tier: Tier::Medium,
            split: Split::Test,
            seed,
        };
        let p = generate(&spec, &DegradationConfig::default(), &GlyphAtlas::builtin()).unwrap();
        (p.lr, p.hr)
    }

    fn run(m: &Dpmn, s: &ParamStore<f64>, lr: &Tensor<f64>, opts: &Forward<'_, f64>) -> (Graph<f64>, DpmnOutput) {
        let mut g = Graph::inference();
        let o = m.forward(&mut g, s, &GlyphAtlas::builtin(), lr, opts).unwrap();
        (g, o)
    }

    #[test]
    fn fusion_endpoints_are_exact() {
        let mut rng = Rng::new(1);
        let mut s = ParamStore::new();
        let m = Dpmn::new(&mut s, &mut rng, &tiny_cfg()).unwrap();
        let (lr, _) = sample(3);
        for (alpha, pick) in [(0.0, 0), (1.0, 1)] {
            let (g, o) = run(&m, &s, &lr, &Forward::frozen(alpha));
            let want = if pick == 0 { o.i0 } else { o.fused };
            assert_eq!(g.value(o.out), g.value(want));
            assert!(g.value(o.out).iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let (g, o) = run(&m, &s, &lr, &Forward::frozen(0.5));
        assert_eq!(o.branches.len(), 2);
        assert!(o.branches.iter().all(|(_, b)| b.len() == 2));
        assert_eq!(g.shape(o.out), &[32, 128, 3]);
        let (g2, o2) = run(&m, &s, &lr, &Forward::frozen(0.5));
        assert_eq!(g.value(o.out), g2.value(o2.out));
    }

    #[test]
    fn single_branch_and_variants_build_and_run() {
        let (lr, hr) = sample(4);
        for (branches, cmm) in [
            (Branches::Single(PriorKind::Structure), CmmVariant::TsrnLike),
            (Branches::Single(PriorKind::Concat), CmmVariant::UnetLike),
            (Branches::Dual, CmmVariant::NoCa),
        ] {
            let cfg = NetConfig {
                branches,
                cmm,
                n_pgrm: 1,
                ..tiny_cfg()
            };
            let mut s = ParamStore::new();
            let m = Dpmn::new(&mut s, &mut Rng::new(5), &cfg).unwrap();
            for psn in [PsnMode::Frozen, PsnMode::Finetune, PsnMode::Standalone] {
                let opts = Forward {
                    psn,
                    oracle: Some(&hr),
                    alpha: 0.5,
                };
                let (g, o) = run(&m, &s, &lr, &opts);
                assert_eq!(o.branches.len(), branches.kinds().len());
                assert!(g.value(o.out).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
        assert!(Dpmn::new(&mut ParamStore::<f64>::new(), &mut Rng::new(0), &NetConfig { heads: 4, ..tiny_cfg() }).is_err());
    }

    #[test]
    fn frozen_psn_gets_no_gradient_and_finetune_does() {
        let (lr, hr) = sample(6);
        let mut s = ParamStore::<f64>::new();
        let m = Dpmn::new(&mut s, &mut Rng::new(7), &NetConfig { n_pgrm: 1, ..tiny_cfg() }).unwrap();
        let psn = Dpmn::psn_ids(&s);
        assert_eq!(psn.len(), 2 * 6);
        for (mode, moved) in [(PsnMode::Frozen, false), (PsnMode::Finetune, true)] {
            let mut g = Graph::new();
            let o = m.forward(&mut g, &s, &GlyphAtlas::builtin(), &lr, &Forward { psn: mode, oracle: None, alpha: 0.5 }).unwrap();
            let t = g.input(hr.clone());
            let l = m.loss(&mut g, &o, t, &LossWeights::default()).unwrap();
            g.backward(l).unwrap();
            s.zero_grads();
            s.accumulate_grads(&g, 1.0);
            let any = psn.iter().any(|&id| s.get(id).grad.iter().any(|&v| v != 0.0));
            assert_eq!(any, moved, "{mode:?}");
        }
    }

    #[test]
    fn priors_path_carries_no_gradient() {
        let (_, hr) = sample(8);
        let mut s = ParamStore::<f64>::new();
        let m = Dpmn::new(&mut s, &mut Rng::new(9), &NetConfig { n_pgrm: 1, ..tiny_cfg() }).unwrap();
        let atlas = GlyphAtlas::builtin();
        for (_, mods) in &m.branches {
            let pgrm = &mods[0];
            let mut g = Graph::new();
            let x = g.leaf(hr.clone(), true);
            let prior = prior_for(pgrm.kind, &g.tensor(x), &atlas).unwrap();
            let (pt, _) = pgrm.embed_prior(&mut g, &s, &prior).unwrap();
            let sq = g.mul(pt, pt).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap();
            assert!(g.grad(x).iter().all(|&v| v == 0.0));
            let w = g.param(&s, pgrm.prior_embed.w);
            assert!(g.grad(w).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn full_model_total_loss_passes_gradcheck() {
        let (lr, hr) = sample(10);
        let mut s = ParamStore::<f64>::new();
        let cfg = NetConfig { n_pgrm: 1, ..tiny_cfg() };
        let mut rng = Rng::new(11);
        let m = Dpmn::new(&mut s, &mut rng, &cfg).unwrap();
        // neighbours at least 0.7 apart keep |grad p - grad t| off its kink
        let target = Tensor::from_fn(&[32, 128, 3], |i| {
            let v = 0.15 * rng.uniform();
            if (i / 384 + i / 3) % 2 == 0 { v } else { 1.0 - v }
        });
        let atlas = GlyphAtlas::builtin();
        let opts = GradcheckOptions {
            max_entries: Some(2),
            abs_floor: 1e-5,
            ..Default::default()
        };
        let report = gradcheck(&mut s, &opts, |g, s| {
            let fw = Forward {
                psn: PsnMode::Finetune,
                oracle: Some(&hr),
                alpha: 0.5,
            };
            let o = m.forward(g, s, &atlas, &lr, &fw).map_err(|e| e.into_diff())?;
            let t = g.input(target.clone());
            m.loss(g, &o, t, &LossWeights::default()).map_err(|e| e.into_diff())
        })
        .unwrap();
        assert!(report.passed(), "{:#?}", report.params.iter().filter(|p| p.max_rel_err > 1e-4 || p.non_finite).collect::<Vec<_>>());
    }
}
