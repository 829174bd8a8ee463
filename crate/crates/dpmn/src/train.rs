//! Baseline pre-training and refinement-network training.
//!
//! Each step evaluates the samples of a mini-batch in parallel, one graph
//! per sample, and sums their gradients in batch order so results do not
//! depend on the thread count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use dpmn_core::diff::AdamConfig;
use dpmn_core::losses::{img_loss, LossWeights};
use dpmn_core::net::{Dpmn, Forward, PsnMode, TinyPsn, PSN_PREFIX};
use dpmn_core::priors::GlyphAtlas;
use dpmn_core::{Graph, ParamStore, Rng, Tensor};
use rayon::prelude::*;

use crate::config::{short_hash, RunConfig};
use crate::dataset::Sample;
use crate::eval::{infer, score_image};
use crate::io::{load_into, manifest_path, read_checkpoint, save_checkpoint, store_tensors};

/// A sample in training precision.
struct Pair {
    lr: Tensor<f32>,
    hr: Tensor<f32>,
}

fn pairs(samples: &[Sample]) -> Vec<Pair> {
    samples
        .iter()
        .map(|s| Pair {
            lr: s.lr.cast(),
            hr: s.hr.cast(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean PSNR of the model output on the validation samples.
    pub val_psnr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config_hash: String,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub wall_seconds: f64,
    pub checkpoint: PathBuf,
    /// Baseline parameters and checkpoint file bitwise untouched by training.
    pub psn_unchanged: Option<bool>,
}

impl RunReport {
    pub fn write_logs(&self, dir: &Path, config_echo: &str) -> anyhow::Result<()> {
        let mut steps = csv::Writer::from_path(dir.join("loss.csv"))?;
        steps.write_record(["step", "loss", "config_hash"])?;
        for (i, l) in self.step_losses.iter().enumerate() {
            steps.write_record([i.to_string(), format!("{l:.9e}"), self.config_hash.clone()])?;
        }
        steps.flush()?;
        let mut ep = csv::Writer::from_path(dir.join("epochs.csv"))?;
        ep.write_record(["epoch", "mean_loss", "val_psnr", "seconds", "config_hash"])?;
        for e in &self.epochs {
            ep.write_record([
                e.epoch.to_string(),
                format!("{:.9e}", e.mean_loss),
                format!("{:.6}", e.val_psnr),
                format!("{:.1}", e.seconds),
                self.config_hash.clone(),
            ])?;
        }
        ep.flush()?;
        let mut log = fs::File::create(dir.join("run.log"))?;
        writeln!(log, "config_hash: {}", self.config_hash)?;
        writeln!(log, "checkpoint: {}", self.checkpoint.display())?;
        writeln!(log, "wall_seconds: {:.1}", self.wall_seconds)?;
        if let Some(u) = self.psn_unchanged {
            writeln!(log, "psn_unchanged: {u}")?;
        }
        writeln!(log, "--- config ---\n{config_echo}")?;
        Ok(())
    }
}

/// One optimizer step per mini-batch for `epochs` passes over `n` samples.
/// `per_sample` returns a sample's loss and flattened parameter gradient.
fn run_epochs<F, E>(
    store: &mut ParamStore<f32>,
    n: usize,
    epochs: usize,
    batch: usize,
    adam: &AdamConfig,
    rng: &mut Rng,
    per_sample: F,
    mut on_epoch: E,
) -> anyhow::Result<Vec<f64>>
where
    F: Fn(&ParamStore<f32>, usize) -> anyhow::Result<(f64, Vec<f32>)> + Sync,
    E: FnMut(usize, &[f64], &ParamStore<f32>) -> anyhow::Result<()>,
{
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let first = losses.len();
        for chunk in order.chunks(batch) {
            let results = chunk
                .par_iter()
                .map(|&i| per_sample(store, i))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mut sum = vec![0.0f32; results[0].1.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (s, v) in sum.iter_mut().zip(g) {
                    *s += v;
                }
            }
            ensure!(loss.is_finite(), "non-finite loss at epoch {epoch}");
            store.zero_grads();
            store.add_flat_grads(&sum, 1.0 / chunk.len() as f64);
            store.adam_step(adam);
            losses.push(loss / chunk.len() as f64);
        }
        on_epoch(epoch, &losses[first..], store)?;
    }
    Ok(losses)
}

fn log_line(msg: &str) {
    eprintln!("[dpmn] {msg}");
}

/// Pre-trains the baseline on `(LR, HR)` pairs and writes a frozen
/// checkpoint with its manifest.
pub fn train_psn(cfg: &RunConfig, train: &[Sample], out: &Path) -> anyhow::Result<RunReport> {
    ensure!(!train.is_empty(), "no training samples");
    let started = Instant::now();
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::new(cfg.seed).fork(0x9511);
    let psn = TinyPsn::new(&mut store, &mut rng, "psn", cfg.net.psn_channels);
    let data = pairs(train);
    let w = LossWeights::default();
    let adam = AdamConfig {
        lr: cfg.psn_lr,
        ..AdamConfig::default()
    };
    let mut epochs = Vec::new();
    let mut t_epoch = Instant::now();
    let step_losses = run_epochs(
        &mut store,
        data.len(),
        cfg.psn_epochs,
        cfg.batch,
        &adam,
        &mut rng,
        |s, i| {
            let mut g = Graph::new();
            let x = g.input(data[i].lr.clone());
            let y = psn.forward(&mut g, s, x)?;
            let t = g.input(data[i].hr.clone());
            let l = img_loss(&mut g, y, t, &w)?;
            g.backward(l)?;
            Ok((g.scalar(l) as f64, s.graph_grads(&g)))
        },
        |epoch, losses, _| {
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            log_line(&format!("psn epoch {} loss {mean:.5}", epoch + 1));
            epochs.push(EpochLog {
                epoch: epoch + 1,
                mean_loss: mean,
                val_psnr: f64::NAN,
                seconds: t_epoch.elapsed().as_secs_f64(),
            });
            t_epoch = Instant::now();
            Ok(())
        },
    )?;
    store.set_frozen(true);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(out, &store, PSN_PREFIX)?;
    let manifest = format!(
        "psn_channels = {}\n# frozen: true\n# psn_hash: {}\n",
        cfg.net.psn_channels,
        cfg.psn_hash()
    );
    fs::write(manifest_path(out), manifest)?;
    Ok(RunReport {
        config_hash: cfg.psn_hash(),
        step_losses,
        epochs,
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint: out.to_path_buf(),
        psn_unchanged: None,
    })
}

/// Forward options of a run; `hr` feeds the oracle-prior variant.
pub fn forward_opts<'a>(cfg: &RunConfig, hr: &'a Tensor<f32>) -> Forward<'a, f32> {
    Forward {
        psn: cfg.strategy,
        oracle: cfg.oracle_priors.then_some(hr),
        alpha: cfg.net.alpha,
    }
}

/// Freshly initialized model for `cfg`.
fn build(cfg: &RunConfig) -> anyhow::Result<(Dpmn, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Dpmn::new(&mut store, &mut Rng::new(cfg.seed).fork(0xd9a), &cfg.net)?;
    Ok((model, store))
}

/// A trained model and the configuration recorded next to it.
pub fn load_dpmn(ckpt: &Path) -> anyhow::Result<(RunConfig, Dpmn, ParamStore<f32>)> {
    let cfg = RunConfig::from_file(&manifest_path(ckpt)).context("reading checkpoint manifest")?;
    let (model, mut store) = build(&cfg)?;
    load_into(&mut store, &read_checkpoint(ckpt)?, "")?;
    store.set_frozen(true);
    Ok((cfg, model, store))
}

/// Trains the refinement network on top of the baseline in `psn_ckpt`
/// (not needed for the standalone strategy). Writes `dpmn.ckpt`, its
/// manifest and the run logs into `out_dir`.
pub fn train_dpmn(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    psn_ckpt: Option<&Path>,
    out_dir: &Path,
) -> anyhow::Result<RunReport> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "no training samples");
    let started = Instant::now();
    let (model, mut store) = build(cfg)?;
    let psn_bytes = match (psn_ckpt, cfg.strategy) {
        (_, PsnMode::Standalone) => None,
        (None, _) => bail!("a frozen baseline checkpoint is required (--psn)"),
        (Some(p), _) => {
            let bytes = fs::read(p).with_context(|| format!("reading baseline checkpoint {}", p.display()))?;
            let tensors = crate::io::decode_checkpoint(&bytes)?;
            load_into(&mut store, &tensors, PSN_PREFIX)?;
            Some((p.to_path_buf(), bytes))
        }
    };
    let psn_before = store_tensors(&store, PSN_PREFIX);
    Dpmn::set_psn_frozen(&mut store, cfg.strategy != PsnMode::Finetune);

    let atlas = GlyphAtlas::builtin();
    let data = pairs(train);
    let val_data = pairs(val);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    fs::create_dir_all(out_dir)?;
    let mut rng = Rng::new(cfg.seed).fork(0x7a1);
    let mut epochs = Vec::new();
    let mut t_epoch = Instant::now();
    let step_losses = run_epochs(
        &mut store,
        data.len(),
        cfg.epochs,
        cfg.batch,
        &adam,
        &mut rng,
        |s, i| {
            let p = &data[i];
            let mut g = Graph::new();
            let o = model.forward(&mut g, s, &atlas, &p.lr, &forward_opts(cfg, &p.hr))?;
            let t = g.input(p.hr.clone());
            let l = model.loss(&mut g, &o, t, &cfg.loss)?;
            g.backward(l)?;
            Ok((g.scalar(l) as f64, s.graph_grads(&g)))
        },
        |epoch, losses, s| {
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            let psnrs = val
                .par_iter()
                .zip(&val_data)
                .map(|(v, p)| {
                    let (_, _, outs) = infer(&model, s, &atlas, &p.lr, &forward_opts(cfg, &p.hr), &[cfg.net.alpha])?;
                    Ok(score_image(&outs[0].cast(), v, &atlas)?.psnr_db)
                })
                .collect::<anyhow::Result<Vec<f64>>>()?;
            let val_psnr = psnrs.iter().sum::<f64>() / psnrs.len().max(1) as f64;
            log_line(&format!(
                "dpmn epoch {}/{} loss {mean:.5} val_psnr {val_psnr:.3} ({:.0}s)",
                epoch + 1,
                cfg.epochs,
                t_epoch.elapsed().as_secs_f64()
            ));
            epochs.push(EpochLog {
                epoch: epoch + 1,
                mean_loss: mean,
                val_psnr,
                seconds: t_epoch.elapsed().as_secs_f64(),
            });
            t_epoch = Instant::now();
            Ok(())
        },
    )?;

    let psn_unchanged = match &psn_bytes {
        Some((path, bytes)) => {
            let same_params = store_tensors(&store, PSN_PREFIX)
                .iter()
                .zip(&psn_before)
                .all(|(a, b)| a.values.iter().map(|v| v.to_bits()).eq(b.values.iter().map(|v| v.to_bits())));
            let same_file = fs::read(path)? == *bytes;
            Some(same_params && same_file)
        }
        None => None,
    };
    if cfg.strategy == PsnMode::Frozen && psn_unchanged != Some(true) {
        bail!("frozen baseline was modified during training");
    }
    let ckpt = out_dir.join("dpmn.ckpt");
    save_checkpoint(&ckpt, &store, "")?;
    let source = psn_bytes.as_ref().map(|(p, b)| format!("{} {}", p.display(), short_hash(b)));
    let manifest = format!(
        "{}# config_hash: {}\n# psn_source: {}\n",
        cfg.to_kv(),
        cfg.hash(),
        source.as_deref().unwrap_or("none")
    );
    fs::write(manifest_path(&ckpt), manifest)?;
    let report = RunReport {
        config_hash: cfg.hash(),
        step_losses,
        epochs,
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint: ckpt,
        psn_unchanged,
    };
    report.write_logs(out_dir, &cfg.to_kv())?;
    Ok(report)
}
