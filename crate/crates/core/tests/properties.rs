use dpmn_core::metrics::{psnr, ssim, Tier};
use dpmn_core::net::{fuse, Dpmn, Forward, NetConfig, PsnMode};
use dpmn_core::priors::{binarize, recognize, GlyphAtlas, TextLabel, LABEL_CHARSET};
use dpmn_core::synth::{dataset_plan, generate, render_hr, DegradationConfig, SampleSpec, Split};
use dpmn_core::{Graph, ParamStore, Rng, Tensor};
use proptest::prelude::*;

fn tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pixel_shuffle_inverts_unshuffle(seed in any::<u64>(), h in 1usize..5, w in 1usize..6, c in 1usize..4, r in 1usize..4) {
        let x = tensor(seed, &[h * r, w * r, c], -1.0, 1.0);
        let mut g = Graph::inference();
        let v = g.input(x.clone());
        let u = g.pixel_unshuffle(v, r).unwrap();
        prop_assert_eq!(g.shape(u), &[h, w, c * r * r][..]);
        let back = g.pixel_shuffle(u, r).unwrap();
        prop_assert_eq!(g.tensor(back), x);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let x = tensor(seed, &[rows, cols], -scale, scale);
        let mut g = Graph::inference();
        let v = g.input(x);
        let s = g.softmax(v).unwrap();
        for row in g.value(s).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layernorm_standardizes_rows(seed in any::<u64>(), rows in 1usize..5, cols in 4usize..17, offset in -5.0f64..5.0) {
        let x = tensor(seed, &[rows, cols], offset - 2.0, offset + 2.0);
        let mut g = Graph::inference();
        let v = g.input(x);
        let gamma = g.input(Tensor::full(&[cols], 1.0));
        let beta = g.input(Tensor::zeros(&[cols]));
        let y = g.layernorm(v, gamma, beta).unwrap();
        for row in g.value(y).chunks(cols) {
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            // the epsilon in the denominator pulls the variance just under 1
            prop_assert!((var - 1.0).abs() < 1e-3 && var <= 1.0);
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", tensor(seed, &[3, 4], -1.0, 1.0));
        let x = tensor(seed ^ 1, &[5, 3], -1.0, 1.0);
        let grad = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let w = g.param(&s, id);
            let xi = g.input(x.clone());
            let y = g.matmul(xi, w).unwrap();
            let y = g.gelu(y).unwrap();
            let sq = g.mul(y, y).unwrap();
            let l1 = g.sum(sq).unwrap();
            let l2 = g.mean(y).unwrap();
            let l1 = g.scale(l1, ca).unwrap();
            let l2 = g.scale(l2, cb).unwrap();
            let l = g.add(l1, l2).unwrap();
            g.backward(l).unwrap();
            g.grad(w)
        };
        let (ga, gb, gab) = (grad(a, 0.0), grad(0.0, b), grad(a, b));
        for ((x, y), z) in ga.iter().zip(&gb).zip(&gab) {
            prop_assert!((x + y - z).abs() < 1e-10 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn binarization_is_idempotent(seed in any::<u64>()) {
        let img = tensor(seed, &[32, 128, 3], 0.0, 1.0);
        let once = binarize(&img).unwrap();
        let twice = binarize(&once.expand_channels(3)).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn generation_is_deterministic(id in 0usize..1000, seed in any::<u64>(), tier in 0usize..3) {
        let atlas = GlyphAtlas::builtin();
        let spec = SampleSpec {
            id,
            label: TextLabel::new("SEED7").unwrap(),
            tier: Tier::ALL[tier],
            split: Split::Train,
            seed,
        };
        let a = generate(&spec, &DegradationConfig::default(), &atlas).unwrap();
        let b = generate(&spec, &DegradationConfig::default(), &atlas).unwrap();
        prop_assert_eq!((a.lr, a.hr), (b.lr, b.hr));
    }

    #[test]
    fn clean_renders_are_recognized(idx in proptest::collection::vec(0usize..36, 1..9), style in any::<u64>()) {
        let alnum: Vec<char> = LABEL_CHARSET.chars().filter(|c| c.is_ascii_uppercase() || c.is_ascii_digit()).collect();
        let text: String = idx.iter().map(|&i| alnum[i % alnum.len()]).collect();
        let label = TextLabel::new(&text).unwrap();
        let atlas = GlyphAtlas::builtin();
        let hr = render_hr(&label, style, &atlas).unwrap();
        prop_assert_eq!(recognize(&hr, &atlas).unwrap().label, label);
    }

    #[test]
    fn metrics_are_symmetric_and_maximal_on_identity(seed in any::<u64>()) {
        let a = tensor(seed, &[16, 24, 3], 0.0, 1.0);
        let b = tensor(seed ^ 7, &[16, 24, 3], 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn fusion_interpolates_between_its_inputs(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let (x, y) = (tensor(seed, &[4, 6, 3], 0.0, 1.0), tensor(seed ^ 3, &[4, 6, 3], 0.0, 1.0));
        let mut g = Graph::inference();
        let (a, b) = (g.input(x.clone()), g.input(y.clone()));
        let f = fuse(&mut g, a, b, alpha).unwrap();
        for ((o, p), q) in g.value(f).iter().zip(x.data()).zip(y.data()) {
            prop_assert!(*o >= p.min(*q) - 1e-15 && *o <= p.max(*q) + 1e-15);
        }
    }
}

#[test]
fn dataset_plan_labels_are_unique_and_splits_balanced() {
    let plan = dataset_plan(90, 30, 5);
    let labels: std::collections::HashSet<_> = plan.iter().map(|s| s.label.as_str().to_string()).collect();
    assert_eq!(labels.len(), plan.len());
    for t in Tier::ALL {
        assert_eq!(plan.iter().filter(|s| s.split == Split::Test && s.tier == t).count(), 30);
        assert_eq!(plan.iter().filter(|s| s.split == Split::Train && s.tier == t).count(), 30);
    }
}

#[test]
fn same_seed_builds_the_same_model_and_output() {
    let cfg = NetConfig {
        n_pgrm: 1,
        embed_dim: 6,
        heads: 3,
        ffn_mult: 2,
        cmm_base: 2,
        psn_channels: 4,
        ..NetConfig::default()
    };
    let lr = tensor(3, &[16, 64, 3], 0.0, 1.0);
    let run = || {
        let mut s = ParamStore::<f64>::new();
        let m = Dpmn::new(&mut s, &mut Rng::new(12), &cfg).unwrap();
        let mut g = Graph::inference();
        let o = m.forward(&mut g, &s, &GlyphAtlas::builtin(), &lr, &Forward { psn: PsnMode::Frozen, oracle: None, alpha: 0.5 }).unwrap();
        g.tensor(o.out)
    };
    assert_eq!(run(), run());
}
