//! On-disk synthetic dataset: `manifest.csv`, `lr/` and `hr/` PPM files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use dpmn_core::metrics::Tier;
use dpmn_core::priors::{GlyphAtlas, TextLabel};
use dpmn_core::synth::{dataset_plan, generate, DegradationConfig, SampleSpec, Split};
use dpmn_core::Tensor;
use rayon::prelude::*;

use crate::io::{read_ppm, write_ppm, Rgb8};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 7] = ["id", "label", "tier", "split", "seed", "lr_path", "hr_path"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub spec: SampleSpec,
    pub lr_path: String,
    pub hr_path: String,
}

/// A loaded sample, pixels as stored.
#[derive(Clone, Debug)]
pub struct Sample {
    pub spec: SampleSpec,
    pub lr: Tensor<f64>,
    pub hr: Tensor<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

fn dir_is_empty(dir: &Path) -> anyhow::Result<bool> {
    Ok(!dir.exists() || fs::read_dir(dir)?.next().is_none())
}

/// Generates and writes a dataset. A non-empty `out` is refused unless
/// `force`, in which case previous dataset files are replaced.
pub fn build_dataset(
    out: &Path,
    n_train: usize,
    n_test_per_tier: usize,
    master_seed: u64,
    degradation: &DegradationConfig,
    force: bool,
) -> anyhow::Result<Dataset> {
    ensure!(degradation.is_valid(), "invalid degradation config {degradation:?}");
    if !dir_is_empty(out)? {
        if !force {
            bail!("{} is not empty (pass --force to overwrite)", out.display());
        }
        for sub in ["lr", "hr"] {
            let p = out.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    fs::create_dir_all(out.join("lr"))?;
    fs::create_dir_all(out.join("hr"))?;
    let atlas = GlyphAtlas::builtin();
    let rows = dataset_plan(n_train, n_test_per_tier, master_seed)
        .into_par_iter()
        .map(|spec| -> anyhow::Result<ManifestRow> {
            let pair = generate(&spec, degradation, &atlas)?;
            let lr_path = format!("lr/{:05}.ppm", spec.id);
            let hr_path = format!("hr/{:05}.ppm", spec.id);
            write_ppm(&out.join(&lr_path), &Rgb8::from_tensor(&pair.lr))?;
            write_ppm(&out.join(&hr_path), &Rgb8::from_tensor(&pair.hr))?;
            Ok(ManifestRow { spec, lr_path, hr_path })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(out.join(MANIFEST))?;
    w.write_record(MANIFEST_HEADER)?;
    for r in &rows {
        let s = &r.spec;
        w.write_record([
            s.id.to_string().as_str(),
            s.label.as_str(),
            s.tier.as_str(),
            s.split.as_str(),
            &s.seed.to_string(),
            &r.lr_path,
            &r.hr_path,
        ])?;
    }
    w.flush()?;
    Ok(Dataset {
        root: out.to_path_buf(),
        rows,
    })
}

impl Dataset {
    pub fn open(root: &Path) -> anyhow::Result<Self> {
        let path = root.join(MANIFEST);
        let mut r = csv::Reader::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
        ensure!(r.headers()?.iter().eq(MANIFEST_HEADER), "{}: unexpected header", path.display());
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let spec = SampleSpec {
                id: field(0).parse().context("id")?,
                label: TextLabel::new(field(1)).context("label")?,
                tier: field(2).parse::<Tier>().map_err(anyhow::Error::msg)?,
                split: field(3).parse::<Split>().map_err(anyhow::Error::msg)?,
                seed: field(4).parse().context("seed")?,
            };
            rows.push(ManifestRow {
                spec,
                lr_path: field(5).to_string(),
                hr_path: field(6).to_string(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            rows,
        })
    }

    /// Rows of a split in manifest order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.spec.split == split)
    }

    pub fn load_row(&self, row: &ManifestRow) -> anyhow::Result<Sample> {
        let lr = read_ppm(&self.root.join(&row.lr_path))?;
        let hr = read_ppm(&self.root.join(&row.hr_path))?;
        ensure!(
            (lr.height, lr.width, hr.height, hr.width) == (dpmn_core::LR_H, dpmn_core::LR_W, dpmn_core::HR_H, dpmn_core::HR_W),
            "sample {} has unexpected image sizes",
            row.spec.id
        );
        Ok(Sample {
            spec: row.spec.clone(),
            lr: lr.to_tensor(),
            hr: hr.to_tensor(),
        })
    }

    /// Training samples, the first `limit` when non-zero.
    pub fn train(&self, limit: usize) -> anyhow::Result<Vec<Sample>> {
        let rows: Vec<_> = self.split(Split::Train).collect();
        let n = if limit == 0 { rows.len() } else { limit.min(rows.len()) };
        rows[..n].par_iter().map(|r| self.load_row(r)).collect()
    }

    /// Test samples, at most `per_tier` of each tier when non-zero.
    pub fn test(&self, per_tier: usize) -> anyhow::Result<Vec<Sample>> {
        let mut seen = [0usize; 3];
        let rows: Vec<_> = self
            .split(Split::Test)
            .filter(|r| {
                let k = &mut seen[r.spec.tier.index()];
                *k += 1;
                per_tier == 0 || *k <= per_tier
            })
            .collect();
        rows.par_iter().map(|r| self.load_row(r)).collect()
    }
}
