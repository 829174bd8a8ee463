//! Test-set evaluation: PSNR, SSIM and recognizer accuracy per tier for
//! bicubic upsampling, the baseline alone and the refined output at each
//! blend ratio.

use std::path::Path;

use anyhow::ensure;
use dpmn_core::metrics::{label_matches, psnr, ssim, EvalRecord, Tier};
use dpmn_core::net::{fuse, Dpmn, Forward, NetError};
use dpmn_core::priors::{recognize, GlyphAtlas};
use dpmn_core::synth::bicubic_upsample2;
use dpmn_core::{Graph, ParamStore, Tensor};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::Sample;
use crate::io::{write_ppm, Rgb8};
use crate::train::forward_opts;

pub const METRICS_HEADER: [&str; 8] = ["run_id", "split", "tier", "psnr", "ssim", "accuracy", "n_samples", "config_hash"];

/// `(I_0, I_M, [I_OUT for each alpha])` for one input, outside any
/// training graph.
pub fn infer(
    model: &Dpmn,
    store: &ParamStore<f32>,
    atlas: &GlyphAtlas,
    lr: &Tensor<f32>,
    opts: &Forward<'_, f32>,
    alphas: &[f64],
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<Tensor<f32>>), NetError> {
    let mut g = Graph::inference();
    let o = model.forward(&mut g, store, atlas, lr, opts)?;
    let outs = alphas
        .iter()
        .map(|&a| {
            let v = fuse(&mut g, o.fused, o.i0, a)?;
            Ok(g.tensor(v))
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    Ok((g.tensor(o.i0), g.tensor(o.fused), outs))
}

/// Metrics of one super-resolved image against its sample.
pub fn score_image(img: &Tensor<f64>, sample: &Sample, atlas: &GlyphAtlas) -> anyhow::Result<EvalRecord> {
    let rec = recognize(img, atlas)?;
    Ok(EvalRecord {
        psnr_db: psnr(img, &sample.hr)?,
        ssim: ssim(img, &sample.hr)?,
        exact_match: label_matches(rec.label.as_str(), sample.spec.label.as_str()),
        recognized: rec.label,
        tier: sample.spec.tier,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub split: String,
    /// `easy`, `medium`, `hard` or `all`.
    pub tier: String,
    pub psnr: f64,
    pub ssim: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub config_hash: String,
}

/// Per-tier rows followed by the sample-weighted `all` row.
pub fn aggregate(run_id: &str, records: &[EvalRecord], config_hash: &str) -> Vec<MetricRow> {
    let row = |tier: &str, rs: Vec<&EvalRecord>| {
        let n = rs.len().max(1) as f64;
        MetricRow {
            run_id: run_id.to_string(),
            split: "test".into(),
            tier: tier.into(),
            psnr: rs.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            ssim: rs.iter().map(|r| r.ssim).sum::<f64>() / n,
            accuracy: rs.iter().filter(|r| r.exact_match).count() as f64 / n,
            n_samples: rs.len(),
            config_hash: config_hash.to_string(),
        }
    };
    let mut out: Vec<_> = Tier::ALL
        .iter()
        .map(|&t| row(t.as_str(), records.iter().filter(|r| r.tier == t).collect()))
        .filter(|r| r.n_samples > 0)
        .collect();
    out.push(row("all", records.iter().collect()));
    out
}

pub fn alpha_run_id(alpha: f64) -> String {
    format!("dpmn_a{alpha:.2}")
}

/// Records of every system on every sample: `bicubic`, `psn` and one
/// `dpmn_a*` system per alpha, in that order.
pub fn evaluate_records(
    cfg: &RunConfig,
    model: &Dpmn,
    store: &ParamStore<f32>,
    samples: &[Sample],
    alphas: &[f64],
) -> anyhow::Result<Vec<(String, Vec<EvalRecord>)>> {
    ensure!(!samples.is_empty(), "no test samples");
    let atlas = GlyphAtlas::builtin();
    let per_sample = samples
        .par_iter()
        .map(|s| -> anyhow::Result<Vec<EvalRecord>> {
            let lr: Tensor<f32> = s.lr.cast();
            let hr: Tensor<f32> = s.hr.cast();
            let opts = forward_opts(cfg, &hr);
            let (i0, _, outs) = infer(model, store, &atlas, &lr, &opts, alphas)?;
            let mut recs = vec![score_image(&bicubic_upsample2(&s.lr), s, &atlas)?, score_image(&i0.cast(), s, &atlas)?];
            for o in &outs {
                recs.push(score_image(&o.cast(), s, &atlas)?);
            }
            Ok(recs)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut names = vec!["bicubic".to_string(), "psn".to_string()];
    names.extend(alphas.iter().map(|&a| alpha_run_id(a)));
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(k, name)| (name, per_sample.iter().map(|r| r[k].clone()).collect()))
        .collect())
}

pub fn evaluate(
    cfg: &RunConfig,
    model: &Dpmn,
    store: &ParamStore<f32>,
    samples: &[Sample],
    alphas: &[f64],
) -> anyhow::Result<Vec<MetricRow>> {
    let hash = cfg.hash();
    Ok(evaluate_records(cfg, model, store, samples, alphas)?
        .iter()
        .flat_map(|(name, recs)| aggregate(name, recs, &hash))
        .collect())
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.split.clone(),
            r.tier.clone(),
            format!("{:.12}", r.psnr),
            format!("{:.12}", r.ssim),
            format!("{:.12}", r.accuracy),
            r.n_samples.to_string(),
            r.config_hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    ensure!(r.headers()?.iter().eq(METRICS_HEADER), "{}: unexpected header", path.display());
    r.records()
        .map(|rec| {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or_default().to_string();
            Ok(MetricRow {
                run_id: f(0),
                split: f(1),
                tier: f(2),
                psnr: f(3).parse()?,
                ssim: f(4).parse()?,
                accuracy: f(5).parse()?,
                n_samples: f(6).parse()?,
                config_hash: f(7),
            })
        })
        .collect()
}

/// Qualitative grid: one row per sample with columns LR (nearest
/// upsampled), `I_0`, `I_M`, `I_OUT` and HR, separated by 2-pixel gaps.
pub fn write_grid(path: &Path, cfg: &RunConfig, model: &Dpmn, store: &ParamStore<f32>, samples: &[&Sample]) -> anyhow::Result<()> {
    const GAP: usize = 2;
    let (h, w) = (dpmn_core::HR_H, dpmn_core::HR_W);
    let cols = 5;
    let (gh, gw) = (samples.len() * (h + GAP) + GAP, cols * (w + GAP) + GAP);
    let mut grid = Tensor::<f64>::full(&[gh, gw, 3], 1.0);
    let atlas = GlyphAtlas::builtin();
    for (row, s) in samples.iter().enumerate() {
        let hr32: Tensor<f32> = s.hr.cast();
        let opts = forward_opts(cfg, &hr32);
        let (i0, im, outs) = infer(model, store, &atlas, &s.lr.cast(), &opts, &[cfg.net.alpha])?;
        let lr_up = Tensor::from_fn(&[h, w, 3], |i| {
            let (y, x, c) = (i / (w * 3), (i / 3) % w, i % 3);
            s.lr.data()[((y / 2) * (w / 2) + x / 2) * 3 + c]
        });
        let tiles = [lr_up, i0.cast(), im.cast(), outs[0].cast(), s.hr.clone()];
        for (col, tile) in tiles.iter().enumerate() {
            let (oy, ox) = (GAP + row * (h + GAP), GAP + col * (w + GAP));
            for y in 0..h {
                let src = &tile.data()[y * w * 3..(y + 1) * w * 3];
                let dst = ((oy + y) * gw + ox) * 3;
                grid.data_mut()[dst..dst + w * 3].copy_from_slice(src);
            }
        }
    }
    write_ppm(path, &Rgb8::from_tensor(&grid))
}
