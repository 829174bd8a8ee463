//! Run configuration as plain `key = value` text.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags (`--seed`, `--alpha`, repeated `--set key=value`).

use std::fmt::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use dpmn_core::losses::LossWeights;
use dpmn_core::net::{NetConfig, PsnMode};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub loss: LossWeights,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub strategy: PsnMode,
    /// Priors from the HR image instead of the running estimate.
    pub oracle_priors: bool,
    /// Allows strategies other than a frozen baseline.
    pub ablation: bool,
    pub psn_epochs: usize,
    pub psn_lr: f64,
    /// Use only the first N training samples (0 = all).
    pub train_limit: usize,
    /// Evaluate at most N test samples per tier (0 = all).
    pub eval_per_tier: usize,
    /// Test samples per tier scored after every epoch for the run log.
    pub val_per_tier: usize,
    /// Blend ratios scored by `eval` and `ablate`.
    pub alpha_sweep: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            loss: LossWeights::default(),
            epochs: 20,
            batch: 16,
            lr: 1e-3,
            seed: 1,
            strategy: PsnMode::Frozen,
            oracle_priors: false,
            ablation: false,
            psn_epochs: 20,
            psn_lr: 1e-3,
            train_limit: 0,
            eval_per_tier: 0,
            val_per_tier: 8,
            alpha_sweep: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> anyhow::Result<V> {
    v.parse().map_err(|_| anyhow::anyhow!("{key}: cannot parse `{v}`"))
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let v = value.trim();
        if self.net.set(key, v)? {
            return Ok(());
        }
        match key {
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_strategy" => self.strategy = v.parse()?,
            "oracle_priors" => self.oracle_priors = parse(key, v)?,
            "ablation" => self.ablation = parse(key, v)?,
            "psn_epochs" => self.psn_epochs = parse(key, v)?,
            "psn_lr" => self.psn_lr = parse(key, v)?,
            "train_limit" => self.train_limit = parse(key, v)?,
            "eval_per_tier" => self.eval_per_tier = parse(key, v)?,
            "val_per_tier" => self.val_per_tier = parse(key, v)?,
            "alpha_sweep" => self.alpha_sweep = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_, _>>()?,
            "lambda_pixel" => self.loss.pixel = parse(key, v)?,
            "lambda_gradient" => self.loss.gradient = parse(key, v)?,
            "lambda_cmm" => self.loss.cmm = parse(key, v)?,
            "lambda_graphic" => self.loss.graphic = parse(key, v)?,
            "lambda_structure" => self.loss.structure = parse(key, v)?,
            // aliases matching the ablation vocabulary
            "single_branch" => self.net.branches = v.parse()?,
            "cmm_variant" => self.net.cmm = v.parse()?,
            "fixed_window" => {
                self.net.window_sizes = vec![parse(key, v)?];
                self.net.dynamic_gate = false;
            }
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> anyhow::Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.net.validate()?;
        ensure!(self.loss.is_valid(), "loss weights must be finite and non-negative");
        ensure!(self.epochs > 0 && self.batch > 0, "epochs and batch must be positive");
        ensure!(self.lr > 0.0 && self.psn_lr > 0.0, "learning rates must be positive");
        ensure!(
            self.alpha_sweep.iter().all(|a| (0.0..=1.0).contains(a)),
            "alpha_sweep values must lie in [0, 1]"
        );
        ensure!(
            self.strategy == PsnMode::Frozen || self.ablation,
            "train_strategy = {} is only available with ablation = true",
            self.strategy.as_str()
        );
        Ok(())
    }

    /// Canonical text; parsing it back yields an equal config.
    pub fn to_kv(&self) -> String {
        let mut out = self.net.to_kv();
        let l = &self.loss;
        let fields: [(&str, String); 18] = [
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("seed", self.seed.to_string()),
            ("train_strategy", self.strategy.as_str().into()),
            ("oracle_priors", self.oracle_priors.to_string()),
            ("ablation", self.ablation.to_string()),
            ("psn_epochs", self.psn_epochs.to_string()),
            ("psn_lr", format!("{:?}", self.psn_lr)),
            ("train_limit", self.train_limit.to_string()),
            ("eval_per_tier", self.eval_per_tier.to_string()),
            ("val_per_tier", self.val_per_tier.to_string()),
            ("alpha_sweep", list(&self.alpha_sweep)),
            ("lambda_pixel", format!("{:?}", l.pixel)),
            ("lambda_gradient", format!("{:?}", l.gradient)),
            ("lambda_cmm", format!("{:?}", l.cmm)),
            ("lambda_graphic", format!("{:?}", l.graphic)),
            ("lambda_structure", format!("{:?}", l.structure)),
        ];
        for (k, v) in fields {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_kv`].
    pub fn hash(&self) -> String {
        short_hash(self.to_kv().as_bytes())
    }

    /// Hash of the settings that shape the baseline network and its training.
    pub fn psn_hash(&self) -> String {
        let text = format!(
            "psn_channels = {}\npsn_epochs = {}\npsn_lr = {:?}\nbatch = {}\nseed = {}\ntrain_limit = {}\n",
            self.net.psn_channels, self.psn_epochs, self.psn_lr, self.batch, self.seed, self.train_limit
        );
        short_hash(text.as_bytes())
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
