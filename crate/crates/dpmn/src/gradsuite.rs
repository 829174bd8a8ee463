//! Finite-difference gradient checks over every block and loss at toy
//! shapes, in fp64, plus the check that nothing flows back through the
//! prior extractors.

use std::time::Instant;

use dpmn_core::diff::{gradcheck, GradcheckOptions, GradcheckReport, Result as DiffResult};
use dpmn_core::losses::{branch_loss, cmm_loss, img_loss, total_loss, LossWeights};
use dpmn_core::net::{Cmm, CmmVariant, Dpmn, Forward, Leff, NetConfig, Pgrm, PsnMode, TinyPsn, WindowCrossAttention};
use dpmn_core::priors::{prior_for, GlyphAtlas, PriorKind, TextLabel};
use dpmn_core::synth::{generate, DegradationConfig, SampleSpec, Split};
use dpmn_core::metrics::Tier;
use dpmn_core::{Graph, ParamStore, Rng, Tensor};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
    pub seconds: f64,
    pub detail: String,
}

fn rand(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

fn toy_pgrm_cfg() -> NetConfig {
    NetConfig {
        embed_dim: 12,
        heads: 6,
        window_sizes: vec![2, 4, 8],
        image_size: (16, 64),
        ..NetConfig::default()
    }
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, y: dpmn_core::Var, w: &Tensor<f64>) -> DiffResult<dpmn_core::Var> {
    let wv = g.input(w.clone());
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn failing(r: &GradcheckReport) -> String {
    r.params
        .iter()
        .filter(|p| p.non_finite || p.max_rel_err > r.tol)
        .map(|p| format!("{} ({:.2e})", p.name, p.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ")
}

fn opts(max_entries: usize, abs_floor: f64) -> GradcheckOptions {
    GradcheckOptions {
        max_entries: Some(max_entries),
        abs_floor,
        ..GradcheckOptions::default()
    }
}

fn patch_embed() -> anyhow::Result<GradcheckReport> {
    let mut rng = Rng::new(21);
    let mut s = ParamStore::new();
    let pg = Pgrm::new(&mut s, &mut rng, "p", &toy_pgrm_cfg(), PriorKind::Graphic);
    let img = rand(&mut rng, &[16, 64, 3], 0.0, 1.0);
    let w = rand(&mut rng, &[8 * 32, 12], -1.0, 1.0);
    let image_embed = [pg.image_embed.w, pg.image_embed.b];
    for id in s.ids().collect::<Vec<_>>() {
        s.get_mut(id).frozen = !image_embed.contains(&id);
    }
    Ok(gradcheck(&mut s, &opts(24, 1e-6), |g, s| {
        let x = g.input(img.clone());
        let (t, _) = pg.embed_image(g, s, x)?;
        probe(g, t, &w)
    })?)
}

fn attention(shifted: bool) -> anyhow::Result<GradcheckReport> {
    let mut rng = Rng::new(if shifted { 23 } else { 22 });
    let mut s = ParamStore::new();
    let att = WindowCrossAttention::new(&mut s, &mut rng, "a", 12, 6, &[2, 4, 8], shifted, true);
    let q = rand(&mut rng, &[8 * 32, 12], -1.0, 1.0);
    let kv = rand(&mut rng, &[8 * 32, 12], -1.0, 1.0);
    let w = rand(&mut rng, &[8 * 32, 12], -1.0, 1.0);
    Ok(gradcheck(&mut s, &opts(16, 1e-6), |g, s| {
        let (a, b) = (g.input(q.clone()), g.input(kv.clone()));
        let o = att.forward(g, s, a, b, (8, 32))?;
        probe(g, o, &w)
    })?)
}

fn leff() -> anyhow::Result<GradcheckReport> {
    let mut rng = Rng::new(24);
    let mut s = ParamStore::new();
    let ff = Leff::new(&mut s, &mut rng, "f", 12, 48);
    let x = rand(&mut rng, &[8 * 32, 12], -1.0, 1.0);
    let w = rand(&mut rng, &[8 * 32, 12], -1.0, 1.0);
    Ok(gradcheck(&mut s, &opts(16, 1e-6), |g, s| {
        let t = g.input(x.clone());
        let o = ff.forward(g, s, t, (8, 32))?;
        probe(g, o, &w)
    })?)
}

fn pgrm() -> anyhow::Result<GradcheckReport> {
    let mut rng = Rng::new(25);
    let mut s = ParamStore::new();
    let pg = Pgrm::new(&mut s, &mut rng, "p", &toy_pgrm_cfg(), PriorKind::Graphic);
    let img = rand(&mut rng, &[16, 64, 3], 0.0, 1.0);
    let hr = rand(&mut rng, &[16, 64, 3], 0.0, 1.0);
    let prior = Tensor::from_fn(&[16, 64, 2], |_| (rng.uniform() < 0.3) as u8 as f64);
    Ok(gradcheck(&mut s, &opts(6, 1e-5), |g, s| {
        let x = g.input(img.clone());
        let t = g.input(hr.clone());
        let y = pg.forward(g, s, x, &prior).map_err(|e| e.into_diff())?;
        img_loss(g, y, t, &LossWeights::default())
    })?)
}

fn cmm() -> anyhow::Result<GradcheckReport> {
    let mut rng = Rng::new(26);
    let mut s = ParamStore::new();
    let m = Cmm::new(&mut s, &mut rng, "cmm", CmmVariant::Full, 4);
    let (a, b, hr) = (
        rand(&mut rng, &[8, 16, 3], 0.0, 1.0),
        rand(&mut rng, &[8, 16, 3], 0.0, 1.0),
        rand(&mut rng, &[8, 16, 3], 0.0, 1.0),
    );
    Ok(gradcheck(&mut s, &opts(8, 1e-6), |g, s| {
        let (x, y, t) = (g.input(a.clone()), g.input(b.clone()), g.input(hr.clone()));
        let o = m.forward(g, s, x, y).map_err(|e| e.into_diff())?;
        cmm_loss(g, o, t)
    })?)
}

fn psn() -> anyhow::Result<GradcheckReport> {
    let mut rng = Rng::new(27);
    let mut s = ParamStore::new();
    let net = TinyPsn::new(&mut s, &mut rng, "psn", 4);
    let lr = rand(&mut rng, &[4, 8, 3], 0.0, 1.0);
    let hr = rand(&mut rng, &[8, 16, 3], 0.0, 1.0);
    Ok(gradcheck(&mut s, &opts(12, 1e-6), |g, s| {
        let (x, t) = (g.input(lr.clone()), g.input(hr.clone()));
        let y = net.forward(g, s, x)?;
        img_loss(g, y, t, &LossWeights::default())
    })?)
}

fn losses() -> anyhow::Result<GradcheckReport> {
    let mut rng = Rng::new(28);
    let hr = rand(&mut rng, &[5, 6, 3], 0.0, 1.0);
    let mut s = ParamStore::new();
    for name in ["a", "b", "m"] {
        s.add(name, rand(&mut rng, &[5, 6, 3], 0.0, 1.0));
    }
    let w = LossWeights {
        pixel: 0.8,
        gradient: 1.2,
        cmm: 1.0,
        graphic: 0.5,
        structure: 2.0,
    };
    Ok(gradcheck(&mut s, &GradcheckOptions::default(), |g, s| {
        let t = g.input(hr.clone());
        let ids: Vec<_> = ["a", "b", "m"].iter().map(|n| s.find(n).expect("registered")).collect();
        let (a, b, m) = (g.param(s, ids[0]), g.param(s, ids[1]), g.param(s, ids[2]));
        let bg = branch_loss(g, &[a, b], t, &w)?;
        let bs = branch_loss(g, &[b], t, &w)?;
        let c = cmm_loss(g, m, t)?;
        total_loss(g, c, Some(bg), Some(bs), &w)
    })?)
}

fn tiny_model_cfg() -> NetConfig {
    NetConfig {
        n_pgrm: 1,
        embed_dim: 6,
        heads: 3,
        ffn_mult: 2,
        cmm_base: 2,
        psn_channels: 4,
        ..NetConfig::default()
    }
}

fn toy_sample(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let spec = SampleSpec {
        id: 0,
        label: TextLabel::new("DPMN42").expect("valid label"),
        tier: Tier::Medium,
        split: Split::Test,
        seed,
    };
    let p = generate(&spec, &DegradationConfig::default(), &GlyphAtlas::builtin()).expect("toy sample");
    (p.lr, p.hr)
}

/// Target whose horizontal and vertical neighbours differ by at least 0.7,
/// so the gradient-profile residual of any sigmoid output stays clear of
/// its kink at zero.
fn checker_target(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, 3], |i| {
        let (y, x) = (i / (w * 3), (i / 3) % w);
        let v = rng.uniform_in(0.0, 0.15);
        if (y + x) % 2 == 0 { v } else { 1.0 - v }
    })
}

/// Smallest `|grad p - grad t|` over the interior of every supervised image.
fn kink_margin(images: &[Tensor<f64>], target: &Tensor<f64>) -> f64 {
    let (h, w) = (target.shape()[0], target.shape()[1]);
    let (t, mut m) = (target.data(), f64::INFINITY);
    for p in images.iter().map(|p| p.data()) {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    if x + 1 < w {
                        let j = i + 3;
                        m = m.min(((p[j] - p[i]) - (t[j] - t[i])).abs());
                    }
                    if y + 1 < h {
                        let j = i + w * 3;
                        m = m.min(((p[j] - p[i]) - (t[j] - t[i])).abs());
                    }
                }
            }
        }
    }
    m
}

const MIN_KINK_MARGIN: f64 = 1e-2;

fn full_model() -> anyhow::Result<GradcheckReport> {
    let (lr, hr) = toy_sample(30);
    let mut rng = Rng::new(31);
    let mut s = ParamStore::new();
    let m = Dpmn::new(&mut s, &mut rng, &tiny_model_cfg())?;
    let target = checker_target(&mut rng, 32, 128);
    let atlas = GlyphAtlas::builtin();
    let fw = Forward {
        psn: PsnMode::Finetune,
        oracle: Some(&hr),
        alpha: 0.5,
    };
    let mut g = Graph::inference();
    let o = m.forward(&mut g, &s, &atlas, &lr, &fw)?;
    let mut images: Vec<_> = o.branches.iter().flat_map(|(_, steps)| steps.iter().map(|&v| g.tensor(v))).collect();
    images.push(g.tensor(o.fused));
    let margin = kink_margin(&images, &target);
    if margin < MIN_KINK_MARGIN {
        anyhow::bail!("check point within {margin:.1e} of a loss kink");
    }
    Ok(gradcheck(&mut s, &opts(2, 1e-5), |g, s| {
        let o = m.forward(g, s, &atlas, &lr, &fw).map_err(|e| e.into_diff())?;
        let t = g.input(target.clone());
        m.loss(g, &o, t, &LossWeights::default()).map_err(|e| e.into_diff())
    })?)
}

/// Every upstream gradient through the prior extractors must be exactly 0.
fn priors_are_constant() -> (bool, String) {
    let (_, hr) = toy_sample(32);
    let atlas = GlyphAtlas::builtin();
    let mut s = ParamStore::<f64>::new();
    let mut rng = Rng::new(33);
    let mut bad = Vec::new();
    for kind in [PriorKind::Graphic, PriorKind::Structure, PriorKind::Concat] {
        let name = format!("{kind:?}").to_lowercase();
        let pg = Pgrm::new(&mut s, &mut rng, &name, &NetConfig::default(), kind);
        let mut g = Graph::new();
        let x = g.leaf(hr.clone(), true);
        let ok = (|| -> anyhow::Result<bool> {
            let prior = prior_for(kind, &g.tensor(x), &atlas)?;
            let (pt, _) = pg.embed_prior(&mut g, &s, &prior)?;
            let sq = g.mul(pt, pt)?;
            let l = g.sum(sq)?;
            g.backward(l)?;
            Ok(g.grad(x).iter().all(|&v| v == 0.0))
        })();
        match ok {
            Ok(true) => {}
            Ok(false) => bad.push(format!("{name} has a non-zero upstream gradient")),
            Err(e) => bad.push(format!("{name}: {e}")),
        }
    }
    (bad.is_empty(), bad.join("; "))
}

type Check = fn() -> anyhow::Result<GradcheckReport>;

pub const CHECKS: [(&str, Check); 9] = [
    ("patch_embed", patch_embed),
    ("dw_mca", || attention(false)),
    ("dsw_mca", || attention(true)),
    ("leff", leff),
    ("pgrm", pgrm),
    ("cmm", cmm),
    ("tiny_psn", psn),
    ("losses", losses),
    ("full_model", full_model),
];

/// Runs every check in order, calling `on_result` as each finishes.
pub fn run_all(mut on_result: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for (name, check) in CHECKS {
        let t = Instant::now();
        let o = match check() {
            Ok(r) => CheckOutcome {
                name,
                max_rel_err: r.max_rel_err(),
                passed: r.passed(),
                seconds: t.elapsed().as_secs_f64(),
                detail: failing(&r),
            },
            Err(e) => CheckOutcome {
                name,
                max_rel_err: f64::NAN,
                passed: false,
                seconds: t.elapsed().as_secs_f64(),
                detail: e.to_string(),
            },
        };
        on_result(&o);
        out.push(o);
    }
    let t = Instant::now();
    let (passed, detail) = priors_are_constant();
    let o = CheckOutcome {
        name: "priors_zero_grad",
        max_rel_err: 0.0,
        passed,
        seconds: t.elapsed().as_secs_f64(),
        detail,
    };
    on_result(&o);
    out.push(o);
    out
}

pub fn format_outcome(o: &CheckOutcome) -> String {
    let mut line = format!(
        "{:<17} {}  max_rel_err {:.3e}  ({:.1}s)",
        o.name,
        if o.passed { "PASS" } else { "FAIL" },
        o.max_rel_err,
        o.seconds
    );
    if !o.detail.is_empty() {
        line.push_str("  ");
        line.push_str(&o.detail);
    }
    line
}
