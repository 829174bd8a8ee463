//! Ablation grids. Every cell trains a model from the shared baseline on
//! the shared dataset, then evaluates it over the blend sweep; the row
//! reports the blend with the best average PSNR.
//!
//! A suite's CSV doubles as its progress record: cells whose hash already
//! appears are skipped, and a CSV written under a different base config is
//! refused.

use std::path::Path;

use anyhow::{bail, ensure};
use dpmn_core::metrics::Tier;
use dpmn_core::net::{Branches, CmmVariant, PsnMode};
use dpmn_core::priors::PriorKind;

use crate::config::{short_hash, RunConfig};
use crate::dataset::Sample;
use crate::eval::{aggregate, evaluate_records, write_metrics, MetricRow};
use crate::train::{load_dpmn, train_dpmn};

pub const SUITES: [&str; 5] = ["priors", "strategy", "pgrm", "window", "cmm"];

pub const ABLATION_HEADER: [&str; 16] = [
    "suite",
    "cell",
    "alpha",
    "psnr",
    "ssim",
    "accuracy",
    "psnr_easy",
    "psnr_medium",
    "psnr_hard",
    "acc_easy",
    "acc_medium",
    "acc_hard",
    "n_samples",
    "train_seconds",
    "config_hash",
    "cell_hash",
];

type Edit = fn(&mut RunConfig);

/// Cells of a named suite as `(name, edit applied to the base config)`.
pub fn suite_cells(suite: &str) -> anyhow::Result<Vec<(&'static str, Edit)>> {
    let cells: Vec<(&'static str, Edit)> = match suite {
        "priors" => vec![
            ("mask", |c| c.net.branches = Branches::Single(PriorKind::Structure)),
            ("graphic", |c| c.net.branches = Branches::Single(PriorKind::Graphic)),
            ("concat", |c| c.net.branches = Branches::Single(PriorKind::Concat)),
            ("dual", |c| c.net.branches = Branches::Dual),
            ("dual_oracle", |c| {
                c.net.branches = Branches::Dual;
                c.oracle_priors = true;
            }),
        ],
        "strategy" => vec![
            ("frozen", |c| c.strategy = PsnMode::Frozen),
            ("finetune", |c| c.strategy = PsnMode::Finetune),
            ("standalone", |c| c.strategy = PsnMode::Standalone),
        ],
        "pgrm" => vec![
            ("n1", |c| c.net.n_pgrm = 1),
            ("n2", |c| c.net.n_pgrm = 2),
            ("n3", |c| c.net.n_pgrm = 3),
            ("n4", |c| c.net.n_pgrm = 4),
            ("n5", |c| c.net.n_pgrm = 5),
        ],
        "window" => vec![
            ("fixed2", |c| fixed(c, 2)),
            ("fixed4", |c| fixed(c, 4)),
            ("fixed8", |c| fixed(c, 8)),
            ("dynamic", |c| {
                c.net.window_sizes = vec![2, 4, 8];
                c.net.dynamic_gate = true;
            }),
        ],
        "cmm" => vec![
            ("full", |c| c.net.cmm = CmmVariant::Full),
            ("no_ca", |c| c.net.cmm = CmmVariant::NoCa),
            ("unet_like", |c| c.net.cmm = CmmVariant::UnetLike),
            ("tsrn_like", |c| c.net.cmm = CmmVariant::TsrnLike),
        ],
        _ => bail!("unknown suite `{suite}` (expected one of {SUITES:?} or `all`)"),
    };
    Ok(cells)
}

fn fixed(c: &mut RunConfig, w: usize) {
    c.net.window_sizes = vec![w];
    c.net.dynamic_gate = false;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub suite: String,
    pub cell: String,
    pub alpha: f64,
    /// The `all` row at the chosen blend.
    pub overall: MetricRow,
    pub psnr_tier: [f64; 3],
    pub acc_tier: [f64; 3],
    pub train_seconds: f64,
    pub config_hash: String,
    pub cell_hash: String,
}

impl AblationRow {
    fn record(&self) -> Vec<String> {
        let f = |v: f64| format!("{v:.12}");
        let mut r = vec![
            self.suite.clone(),
            self.cell.clone(),
            format!("{:.2}", self.alpha),
            f(self.overall.psnr),
            f(self.overall.ssim),
            f(self.overall.accuracy),
        ];
        r.extend(self.psnr_tier.map(f));
        r.extend(self.acc_tier.map(f));
        r.push(self.overall.n_samples.to_string());
        r.push(format!("{:.1}", self.train_seconds));
        r.push(self.config_hash.clone());
        r.push(self.cell_hash.clone());
        r
    }

    fn parse(rec: &csv::StringRecord) -> anyhow::Result<Self> {
        let f = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> anyhow::Result<f64> { Ok(f(i).parse()?) };
        Ok(Self {
            suite: f(0).into(),
            cell: f(1).into(),
            alpha: num(2)?,
            overall: MetricRow {
                run_id: f(1).into(),
                split: "test".into(),
                tier: "all".into(),
                psnr: num(3)?,
                ssim: num(4)?,
                accuracy: num(5)?,
                n_samples: f(12).parse()?,
                config_hash: f(14).into(),
            },
            psnr_tier: [num(6)?, num(7)?, num(8)?],
            acc_tier: [num(9)?, num(10)?, num(11)?],
            train_seconds: num(13)?,
            config_hash: f(14).into(),
            cell_hash: f(15).into(),
        })
    }
}

pub fn read_ablation(path: &Path) -> anyhow::Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    ensure!(r.headers()?.iter().eq(ABLATION_HEADER), "{}: unexpected header", path.display());
    r.records().map(|rec| AblationRow::parse(&rec?)).collect()
}

fn write_ablation(path: &Path, rows: &[AblationRow]) -> anyhow::Result<()> {
    let tmp = path.with_extension("csv.tmp");
    let mut w = csv::Writer::from_path(&tmp)?;
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Cell identity: its full config plus the baseline it starts from.
fn cell_hash(cfg: &RunConfig, psn: &[u8]) -> String {
    let mut bytes = cfg.to_kv().into_bytes();
    bytes.extend_from_slice(psn);
    short_hash(&bytes)
}

/// Runs (or resumes) one suite, writing `<out>/ablation_<suite>.csv` and a
/// directory per cell. Returns every row of the suite.
pub fn run_suite(
    suite: &str,
    base: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    psn_ckpt: &Path,
    out: &Path,
) -> anyhow::Result<Vec<AblationRow>> {
    let cells = suite_cells(suite)?;
    let csv_path = out.join(format!("ablation_{suite}.csv"));
    let base_hash = base.hash();
    let mut rows = if csv_path.exists() { read_ablation(&csv_path)? } else { Vec::new() };
    if let Some(r) = rows.iter().find(|r| r.config_hash != base_hash) {
        bail!(
            "{} was produced with config {} but the current config hashes to {base_hash}; refusing to resume",
            csv_path.display(),
            r.config_hash
        );
    }
    let psn_bytes = std::fs::read(psn_ckpt)?;
    for (name, edit) in cells {
        let mut cfg = base.clone();
        cfg.ablation = true;
        edit(&mut cfg);
        cfg.validate()?;
        let hash = cell_hash(&cfg, &psn_bytes);
        if rows.iter().any(|r| r.cell == name && r.cell_hash == hash) {
            eprintln!("[dpmn] {suite}/{name}: done, skipping");
            continue;
        }
        rows.retain(|r| r.cell != name);
        if let Some(done) = finished_elsewhere(out, suite, &hash)? {
            eprintln!("[dpmn] {suite}/{name}: same cell already run in suite {}", done.suite);
            rows.push(AblationRow {
                suite: suite.into(),
                cell: name.into(),
                overall: MetricRow {
                    run_id: name.into(),
                    ..done.overall
                },
                ..done
            });
            write_ablation(&csv_path, &rows)?;
            continue;
        }
        eprintln!("[dpmn] {suite}/{name}: training");
        let dir = out.join(suite).join(name);
        let report = train_dpmn(&cfg, train, val, Some(psn_ckpt), &dir)?;
        let (cfg, model, store) = load_dpmn(&report.checkpoint)?;
        let systems = evaluate_records(&cfg, &model, &store, test, &cfg.alpha_sweep)?;
        let metrics: Vec<_> = systems.iter().flat_map(|(n, r)| aggregate(n, r, &cfg.hash())).collect();
        write_metrics(&dir.join("eval.csv"), &metrics)?;
        let (k, alpha) = cfg
            .alpha_sweep
            .iter()
            .enumerate()
            .map(|(k, &a)| (k, a))
            .max_by(|a, b| overall(&systems[2 + a.0].1).psnr.total_cmp(&overall(&systems[2 + b.0].1).psnr))
            .expect("non-empty sweep");
        let recs = &systems[2 + k].1;
        let tiers = aggregate(name, recs, &base_hash);
        let pick = |t: Tier, f: fn(&MetricRow) -> f64| tiers.iter().find(|r| r.tier == t.as_str()).map_or(f64::NAN, f);
        rows.push(AblationRow {
            suite: suite.into(),
            cell: name.into(),
            alpha,
            overall: aggregate(name, recs, &base_hash).pop().expect("all row"),
            psnr_tier: Tier::ALL.map(|t| pick(t, |r| r.psnr)),
            acc_tier: Tier::ALL.map(|t| pick(t, |r| r.accuracy)),
            train_seconds: report.wall_seconds,
            config_hash: base_hash.clone(),
            cell_hash: hash,
        });
        write_ablation(&csv_path, &rows)?;
    }
    read_ablation(&csv_path)
}

/// A row with the same cell hash in another suite's CSV under `out`.
fn finished_elsewhere(out: &Path, suite: &str, hash: &str) -> anyhow::Result<Option<AblationRow>> {
    for other in SUITES.iter().filter(|&&s| s != suite) {
        let p = out.join(format!("ablation_{other}.csv"));
        if p.exists() {
            if let Some(r) = read_ablation(&p)?.into_iter().find(|r| r.cell_hash == hash) {
                return Ok(Some(r));
            }
        }
    }
    Ok(None)
}

fn overall(recs: &[dpmn_core::metrics::EvalRecord]) -> MetricRow {
    aggregate("", recs, "").pop().expect("all row")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_cell_yields_a_valid_config() {
        for suite in SUITES {
            let cells = suite_cells(suite).unwrap();
            assert!(!cells.is_empty());
            for (name, edit) in cells {
                let mut c = RunConfig {
                    ablation: true,
                    ..RunConfig::default()
                };
                edit(&mut c);
                c.validate().unwrap_or_else(|e| panic!("{suite}/{name}: {e}"));
            }
        }
        assert!(suite_cells("colours").is_err());
    }
}
