//! The refinement network: windowed cross-attention refinement modules,
//! the modulation module that fuses the two branches, and the small
//! pre-trained super-resolution baseline the refinement starts from.

mod attention;
mod cmm;
mod layers;
mod model;
mod pgrm;
mod psn;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

pub use attention::{WindowCrossAttention, WindowGate};
pub use cmm::{ChannelAttention, Cmm, CmmBody, Encoder};
pub use layers::{Conv, LayerNorm, Linear, ResBlock};
pub use model::{fuse, Dpmn, DpmnOutput, Forward, PsnMode, PSN_PREFIX};
pub use pgrm::{Leff, Pgrm, Stage};
pub use psn::TinyPsn;

use crate::diff::DiffError;
use crate::priors::{PriorError, PriorKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
}

impl NetError {
    /// Collapses into a graph error, for closures that must return one.
    pub fn into_diff(self) -> DiffError {
        match self {
            NetError::Diff(e) => e,
            other => DiffError::InvalidShape {
                op: "net",
                shape: Vec::new(),
                reason: other.to_string(),
            },
        }
    }
}

/// Which refinement branches feed the modulation module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branches {
    Dual,
    /// One branch; its output is given to both modulation inputs.
    Single(PriorKind),
}

impl Branches {
    pub fn kinds(self) -> Vec<PriorKind> {
        match self {
            Branches::Dual => vec![PriorKind::Graphic, PriorKind::Structure],
            Branches::Single(k) => vec![k],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Branches::Dual => "dual",
            Branches::Single(PriorKind::Structure) => "mask",
            Branches::Single(PriorKind::Graphic) => "graphic",
            Branches::Single(PriorKind::Concat) => "concat",
        }
    }
}

impl FromStr for Branches {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        Ok(match s {
            "dual" => Branches::Dual,
            "mask" => Branches::Single(PriorKind::Structure),
            "graphic" => Branches::Single(PriorKind::Graphic),
            "concat" => Branches::Single(PriorKind::Concat),
            _ => return Err(NetError::Config(format!("unknown branches `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmmVariant {
    Full,
    /// Encoder-decoder without channel attention.
    NoCa,
    /// Encoder-decoder with additive encoder skips into the decoder.
    UnetLike,
    /// Shallow residual conv stack on the concatenated images.
    TsrnLike,
}

impl CmmVariant {
    pub const ALL: [CmmVariant; 4] = [CmmVariant::Full, CmmVariant::NoCa, CmmVariant::UnetLike, CmmVariant::TsrnLike];

    pub fn as_str(self) -> &'static str {
        match self {
            CmmVariant::Full => "full",
            CmmVariant::NoCa => "no_ca",
            CmmVariant::UnetLike => "unet_like",
            CmmVariant::TsrnLike => "tsrn_like",
        }
    }
}

impl FromStr for CmmVariant {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        CmmVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| NetError::Config(format!("unknown cmm variant `{s}`")))
    }
}

/// Architecture hyper-parameters. Everything needed to rebuild the
/// parameter layout of a checkpoint lives here.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Refinement modules per branch.
    pub n_pgrm: usize,
    /// Window side lengths in tokens, one head group each.
    pub window_sizes: Vec<usize>,
    pub heads: usize,
    pub patch: usize,
    pub embed_dim: usize,
    /// Super-resolved image size `(H, W)`.
    pub image_size: (usize, usize),
    /// Output blend `alpha * I_M + (1 - alpha) * I_0`.
    pub alpha: f64,
    pub dynamic_gate: bool,
    pub ffn_mult: usize,
    pub branches: Branches,
    pub cmm: CmmVariant,
    pub cmm_base: usize,
    pub psn_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_pgrm: 3,
            window_sizes: vec![2, 4, 8],
            heads: 6,
            patch: 2,
            embed_dim: 48,
            image_size: (crate::HR_H, crate::HR_W),
            alpha: 0.5,
            dynamic_gate: true,
            ffn_mult: 4,
            branches: Branches::Dual,
            cmm: CmmVariant::Full,
            cmm_base: 16,
            psn_channels: 32,
        }
    }
}

const KEYS: [&str; 13] = [
    "n_pgrm",
    "window_sizes",
    "heads",
    "patch",
    "embed_dim",
    "image_size",
    "alpha",
    "dynamic_gate",
    "ffn_mult",
    "branches",
    "cmm",
    "cmm_base",
    "psn_channels",
];

impl NetConfig {
    /// Token grid `(H / patch, W / patch)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.n_pgrm == 0 || self.heads == 0 || self.patch == 0 || self.embed_dim == 0 || self.ffn_mult == 0 {
            return bad("n_pgrm, heads, patch, embed_dim and ffn_mult must be positive".into());
        }
        if self.window_sizes.is_empty() || self.window_sizes.contains(&0) {
            return bad(format!("window sizes {:?} must be non-empty and positive", self.window_sizes));
        }
        if self.heads % self.window_sizes.len() != 0 {
            return bad(format!("{} heads do not split over {} window sizes", self.heads, self.window_sizes.len()));
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        let (h, w) = self.image_size;
        if h % self.patch != 0 || w % self.patch != 0 {
            return bad(format!("image {h}x{w} is not divisible by patch {}", self.patch));
        }
        let (gh, gw) = self.grid();
        if let Some(ws) = self.window_sizes.iter().find(|&&ws| gh % ws != 0 || gw % ws != 0) {
            return bad(format!("token grid {gh}x{gw} is not divisible by window {ws}"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.cmm != CmmVariant::TsrnLike && (h % 4 != 0 || w % 4 != 0) {
            return bad(format!("image {h}x{w} must be divisible by 4 for the encoder-decoder"));
        }
        if self.cmm_base == 0 || self.psn_channels == 0 {
            return bad("cmm_base and psn_channels must be positive".into());
        }
        Ok(())
    }

    /// `key = value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match key {
            "n_pgrm" => self.n_pgrm.to_string(),
            "window_sizes" => list(&self.window_sizes),
            "heads" => self.heads.to_string(),
            "patch" => self.patch.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "image_size" => format!("{}x{}", self.image_size.0, self.image_size.1),
            "alpha" => format!("{:?}", self.alpha),
            "dynamic_gate" => self.dynamic_gate.to_string(),
            "ffn_mult" => self.ffn_mult.to_string(),
            "branches" => self.branches.as_str().into(),
            "cmm" => self.cmm.as_str().into(),
            "cmm_base" => self.cmm_base.to_string(),
            "psn_channels" => self.psn_channels.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Sets one field from its textual value. Returns `Ok(false)` when the
    /// key is not a network key, so callers can route it elsewhere.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, NetError> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V, NetError> {
            v.parse().map_err(|_| NetError::Config(format!("{key}: cannot parse `{v}`")))
        }
        let v = value.trim();
        match key {
            "n_pgrm" => self.n_pgrm = num(key, v)?,
            "window_sizes" => {
                self.window_sizes = v.split(',').map(|x| num(key, x.trim())).collect::<Result<_, _>>()?;
            }
            "heads" => self.heads = num(key, v)?,
            "patch" => self.patch = num(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "image_size" => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| NetError::Config(format!("image_size: expected HxW, got `{v}`")))?;
                self.image_size = (num(key, h)?, num(key, w)?);
            }
            "alpha" => self.alpha = num(key, v)?,
            "dynamic_gate" => self.dynamic_gate = num(key, v)?,
            "ffn_mult" => self.ffn_mult = num(key, v)?,
            "branches" => self.branches = v.parse()?,
            "cmm" => self.cmm = v.parse()?,
            "cmm_base" => self.cmm_base = num(key, v)?,
            "psn_channels" => self.psn_channels = num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses the output of [`NetConfig::to_kv`]. Missing keys keep their
    /// defaults; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self, NetError> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NetError::Config(format!("expected `key = value`, got `{line}`")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(NetError::Config(format!("unknown key `{}`", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
