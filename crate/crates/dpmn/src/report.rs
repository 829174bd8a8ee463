//! Markdown tables from the metric and ablation CSVs under a run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ablate::{read_ablation, SUITES};
use crate::eval::read_metrics;

fn find(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

/// Renders every `eval.csv` and `ablation_<suite>.csv` below `dir`.
pub fn render(dir: &Path) -> anyhow::Result<String> {
    let mut md = String::from("# Results\n");
    let mut evals = Vec::new();
    find(dir, "eval.csv", &mut evals)?;
    for path in evals {
        let rows = read_metrics(&path)?;
        let rel = path.strip_prefix(dir).unwrap_or(&path);
        writeln!(md, "\n## {}\n", rel.display())?;
        if let Some(r) = rows.first() {
            writeln!(md, "config `{}`\n", r.config_hash)?;
        }
        writeln!(md, "| system | tier | PSNR | SSIM | accuracy | n |")?;
        writeln!(md, "|---|---|---:|---:|---:|---:|")?;
        for r in rows {
            writeln!(
                md,
                "| {} | {} | {:.2} | {:.4} | {:.1}% | {} |",
                r.run_id,
                r.tier,
                r.psnr,
                r.ssim,
                100.0 * r.accuracy,
                r.n_samples
            )?;
        }
    }
    for suite in SUITES {
        let path = dir.join(format!("ablation_{suite}.csv"));
        if !path.exists() {
            continue;
        }
        let rows = read_ablation(&path)?;
        writeln!(md, "\n## Ablation: {suite}\n")?;
        if let Some(r) = rows.first() {
            writeln!(md, "base config `{}`\n", r.config_hash)?;
        }
        writeln!(md, "| cell | alpha | PSNR | SSIM | accuracy | PSNR easy/med/hard | acc easy/med/hard | train s |")?;
        writeln!(md, "|---|---:|---:|---:|---:|---|---|---:|")?;
        for r in rows {
            let [pe, pm, ph] = r.psnr_tier;
            let [ae, am, ah] = r.acc_tier.map(|a| 100.0 * a);
            writeln!(
                md,
                "| {} | {:.2} | {:.2} | {:.4} | {:.1}% | {pe:.2} / {pm:.2} / {ph:.2} | {ae:.0}% / {am:.0}% / {ah:.0}% | {:.0} |",
                r.cell,
                r.alpha,
                r.overall.psnr,
                r.overall.ssim,
                100.0 * r.overall.accuracy,
                r.train_seconds
            )?;
        }
    }
    Ok(md)
}
