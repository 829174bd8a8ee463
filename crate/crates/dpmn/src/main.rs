use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dpmn::ablate::{run_suite, SUITES};
use dpmn::config::RunConfig;
use dpmn::dataset::{build_dataset, Dataset};
use dpmn::eval::{evaluate, write_grid, write_metrics};
use dpmn::gradsuite::{format_outcome, run_all};
use dpmn::train::{load_dpmn, train_dpmn, train_psn};
use dpmn_core::synth::DegradationConfig;

#[derive(Parser)]
#[command(name = "dpmn", version, about = "Dual-prior refinement for text image super-resolution")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Blend ratio between the refined image and the baseline output.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "DPMN_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_test_per_tier: usize,
        /// Replace an existing dataset in `out`.
        #[arg(long)]
        force: bool,
    },
    /// Pre-train the baseline network and write a frozen checkpoint.
    TrainPsn {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the refinement network on a frozen baseline.
    TrainDpmn {
        #[arg(long)]
        dataset: PathBuf,
        /// Baseline checkpoint (not needed for the standalone strategy).
        #[arg(long)]
        psn: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Allow non-default training strategies.
        #[arg(long)]
        ablation: bool,
    },
    /// Score a trained model on the test split; writes eval.csv and grid.ppm.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation suite (`all` runs every suite).
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Shared baseline; trained into `out/psn.ckpt` when absent.
        #[arg(long)]
        psn: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over every block and loss.
    Gradcheck,
    /// Markdown summary of the CSVs under a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.alpha {
            cfg.net.alpha = a;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

fn psn_for_ablation(cfg: &RunConfig, ds: &Dataset, given: Option<PathBuf>, out: &Path) -> anyhow::Result<PathBuf> {
    if let Some(p) = given {
        return Ok(p);
    }
    let p = out.join("psn.ckpt");
    if !p.exists() {
        eprintln!("[dpmn] training shared baseline into {}", p.display());
        let report = train_psn(cfg, &ds.train(cfg.train_limit)?, &p)?;
        report.write_logs(out, &cfg.to_kv())?;
    }
    Ok(p)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = cli.common.run_config()?;
    match cli.cmd {
        Cmd::GenData {
            out,
            n_train,
            n_test_per_tier,
            force,
        } => {
            let ds = build_dataset(&out, n_train, n_test_per_tier, cfg.seed, &DegradationConfig::default(), force)?;
            println!("wrote {} samples to {}", ds.rows.len(), out.display());
        }
        Cmd::TrainPsn { dataset, out } => {
            let ds = Dataset::open(&dataset)?;
            let report = train_psn(&cfg, &ds.train(cfg.train_limit)?, &out)?;
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            report.write_logs(dir, &cfg.to_kv())?;
            println!("baseline checkpoint {} ({:.0}s)", out.display(), report.wall_seconds);
        }
        Cmd::TrainDpmn {
            dataset,
            psn,
            out,
            ablation,
        } => {
            cfg.ablation |= ablation;
            let ds = Dataset::open(&dataset)?;
            let report = train_dpmn(&cfg, &ds.train(cfg.train_limit)?, &ds.test(cfg.val_per_tier)?, psn.as_deref(), &out)?;
            println!("checkpoint {} ({:.0}s)", report.checkpoint.display(), report.wall_seconds);
        }
        Cmd::Eval { dataset, checkpoint, out } => {
            let (mut mcfg, model, store) = load_dpmn(&checkpoint)?;
            let alphas = match cli.common.alpha {
                Some(a) => {
                    mcfg.net.alpha = a;
                    vec![a]
                }
                None => mcfg.alpha_sweep.clone(),
            };
            let ds = Dataset::open(&dataset)?;
            let test = ds.test(mcfg.eval_per_tier)?;
            std::fs::create_dir_all(&out)?;
            let rows = evaluate(&mcfg, &model, &store, &test, &alphas)?;
            write_metrics(&out.join("eval.csv"), &rows)?;
            for r in rows.iter().filter(|r| r.tier == "all") {
                println!("{:<12} psnr {:.3} ssim {:.4} acc {:.3}", r.run_id, r.psnr, r.ssim, r.accuracy);
            }
            let mut picks = Vec::new();
            for tier in dpmn_core::metrics::Tier::ALL {
                picks.extend(test.iter().filter(|s| s.spec.tier == tier).take(2));
            }
            write_grid(&out.join("grid.ppm"), &mcfg, &model, &store, &picks)?;
        }
        Cmd::Ablate { dataset, suite, out, psn } => {
            std::fs::create_dir_all(&out)?;
            let ds = Dataset::open(&dataset)?;
            let suites: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite.as_str()] };
            let train = ds.train(cfg.train_limit)?;
            let val = ds.test(cfg.val_per_tier)?;
            let test = ds.test(cfg.eval_per_tier)?;
            let psn = psn_for_ablation(&cfg, &ds, psn, &out)?;
            for s in suites {
                for r in run_suite(s, &cfg, &train, &val, &test, &psn, &out)? {
                    println!(
                        "{s}/{:<12} alpha {:.2} psnr {:.3} acc {:.3}",
                        r.cell, r.alpha, r.overall.psnr, r.overall.accuracy
                    );
                }
            }
        }
        Cmd::Gradcheck => {
            let results = run_all(|o| println!("{}", format_outcome(o)));
            let failed = results.iter().filter(|o| !o.passed).count();
            println!("{} checks, {failed} failed", results.len());
            return Ok(failed == 0);
        }
        Cmd::Report { out } => {
            let md = dpmn::report::render(&out)?;
            std::fs::write(out.join("report.md"), &md)?;
            print!("{md}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
