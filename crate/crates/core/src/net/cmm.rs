use alloc::format;
use alloc::vec::Vec;

use super::layers::{Conv, Linear, ResBlock};
use super::{CmmVariant, NetError};
use crate::diff::{Graph, ParamStore, Result, Var};
use crate::real::Real;
use crate::rng::Rng;

/// Six 3x3 convolutions, `3 -> c -> c(s2) -> 2c -> 2c(s2) -> 4c -> 4c`,
/// each followed by gelu.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv>,
}

impl Encoder {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, c: usize) -> Self {
        let plan = [(3, c, 1), (c, c, 2), (c, 2 * c, 1), (2 * c, 2 * c, 2), (2 * c, 4 * c, 1), (4 * c, 4 * c, 1)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(a, b, st))| Conv::new(store, rng, &format!("{name}.c{i}"), 3, a, b, st, 1))
            .collect();
        Self { convs }
    }

    /// Bottleneck features plus the full-resolution (after conv 0) and
    /// half-resolution (after conv 2) activations used as skips.
    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<(Var, [Var; 2])> {
        let mut h = x;
        let mut skips = [x, x];
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, s, h)?;
            h = g.gelu(h)?;
            match i {
                0 => skips[0] = h,
                2 => skips[1] = h,
                _ => {}
            }
        }
        Ok((h, skips))
    }
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    /// Per-channel weights in `(0, 1)` from global average pooling.
    pub fn weights<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, f: Var) -> Result<Var> {
        let p = g.global_avg_pool(f)?;
        let h = self.fc1.forward(g, s, p)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, s, h)?;
        g.sigmoid(h)
    }
}

#[derive(Clone, Debug)]
pub enum CmmBody {
    EncoderDecoder {
        enc_g: Encoder,
        enc_s: Encoder,
        ca: Option<ChannelAttention>,
        /// `8c -> 4c -> 2c`, up, `2c -> 2c -> c`, up, `c -> c -> 3`.
        dec: Vec<Conv>,
        skips: bool,
    },
    /// Shallow residual fusion of the concatenated images.
    Residual {
        head: Conv,
        blocks: Vec<ResBlock>,
        tail: Conv,
    },
}

/// Fuses the two branch outputs into one image in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct Cmm {
    pub variant: CmmVariant,
    pub body: CmmBody,
}

impl Cmm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, variant: CmmVariant, c: usize) -> Self {
        let body = match variant {
            CmmVariant::TsrnLike => CmmBody::Residual {
                head: Conv::same3(store, rng, &format!("{name}.head"), 6, 2 * c),
                blocks: (0..2).map(|i| ResBlock::new(store, rng, &format!("{name}.rb{i}"), 2 * c)).collect(),
                tail: Conv::same3(store, rng, &format!("{name}.tail"), 2 * c, 3),
            },
            _ => {
                let enc_g = Encoder::new(store, rng, &format!("{name}.enc_g"), c);
                let enc_s = Encoder::new(store, rng, &format!("{name}.enc_s"), c);
                let ca = (variant != CmmVariant::NoCa).then(|| ChannelAttention {
                    fc1: Linear::new(store, rng, &format!("{name}.ca1"), 8 * c, 2 * c),
                    fc2: Linear::new(store, rng, &format!("{name}.ca2"), 2 * c, 8 * c),
                });
                let plan = [(8 * c, 4 * c), (4 * c, 2 * c), (2 * c, 2 * c), (2 * c, c), (c, c), (c, 3)];
                let dec = plan
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b))| Conv::same3(store, rng, &format!("{name}.dec{i}"), a, b))
                    .collect();
                CmmBody::EncoderDecoder {
                    enc_g,
                    enc_s,
                    ca,
                    dec,
                    skips: variant == CmmVariant::UnetLike,
                }
            }
        };
        Self { variant, body }
    }

    /// Modulated image from the graphic-branch and structure-branch images.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, img_g: Var, img_s: Var) -> Result<Var, NetError> {
        if g.shape(img_g) != g.shape(img_s) {
            return Err(NetError::Shape(format!(
                "CMM inputs differ: {:?} vs {:?}",
                g.shape(img_g),
                g.shape(img_s)
            )));
        }
        Ok(self.forward_inner(g, s, img_g, img_s, None)?)
    }

    /// Forward with the channel-attention weights optionally replaced by a
    /// constant tensor (used to probe the residual path).
    pub fn forward_inner<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        img_g: Var,
        img_s: Var,
        ca_override: Option<Var>,
    ) -> Result<Var> {
        match &self.body {
            CmmBody::Residual { head, blocks, tail } => {
                let x = g.concat(&[img_g, img_s], 2)?;
                let mut h = head.forward(g, s, x)?;
                h = g.gelu(h)?;
                for b in blocks {
                    h = b.forward(g, s, h)?;
                }
                let h = tail.forward(g, s, h)?;
                g.sigmoid(h)
            }
            CmmBody::EncoderDecoder {
                enc_g,
                enc_s,
                ca,
                dec,
                skips,
            } => {
                let (fg, sk_g) = enc_g.forward(g, s, img_g)?;
                let (fs, sk_s) = enc_s.forward(g, s, img_s)?;
                let fm = g.concat(&[fg, fs], 2)?;
                let f = match (ca_override, ca) {
                    (Some(w), _) => {
                        let m = g.mul(fm, w)?;
                        g.add(m, fm)?
                    }
                    (None, Some(ca)) => {
                        let w = ca.weights(g, s, fm)?;
                        let m = g.mul(fm, w)?;
                        g.add(m, fm)?
                    }
                    (None, None) => fm,
                };
                let mut h = f;
                for (i, c) in dec.iter().enumerate() {
                    if i == 2 || i == 4 {
                        h = g.upsample_nearest(h, 2)?;
                    }
                    h = c.forward(g, s, h)?;
                    if i == 5 {
                        break;
                    }
                    h = g.gelu(h)?;
                    if *skips && (i == 2 || i == 4) {
                        let k = if i == 2 { 1 } else { 0 };
                        h = g.add(h, sk_g[k])?;
                        h = g.add(h, sk_s[k])?;
                    }
                }
                g.sigmoid(h)
            }
        }
    }

    /// The concatenated bottleneck features `F_M` and the decoder input for
    /// a given channel-attention weight node.
    pub fn bottleneck<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, img_g: Var, img_s: Var) -> Result<Option<Var>> {
        match &self.body {
            CmmBody::EncoderDecoder { enc_g, enc_s, .. } => {
                let (fg, _) = enc_g.forward(g, s, img_g)?;
                let (fs, _) = enc_s.forward(g, s, img_s)?;
                Ok(Some(g.concat(&[fg, fs], 2)?))
            }
            CmmBody::Residual { .. } => Ok(None),
        }
    }
}
