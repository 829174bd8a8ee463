use alloc::format;
use alloc::vec::Vec;

use super::layers::{Conv, ResBlock};
use crate::diff::{Graph, ParamStore, Result, Var};
use crate::real::Real;
use crate::rng::Rng;

/// Small 2x super-resolution baseline: conv, two residual blocks, conv to
/// `3 * 4` channels, pixel shuffle, sigmoid.
#[derive(Clone, Debug)]
pub struct TinyPsn {
    pub head: Conv,
    pub blocks: Vec<ResBlock>,
    pub tail: Conv,
}

impl TinyPsn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, ch: usize) -> Self {
        Self {
            head: Conv::same3(store, rng, &format!("{name}.head"), 3, ch),
            blocks: (0..2).map(|i| ResBlock::new(store, rng, &format!("{name}.rb{i}"), ch)).collect(),
            tail: Conv::same3(store, rng, &format!("{name}.tail"), ch, 12),
        }
    }

    /// `[h, w, 3]` low-resolution image to `[2h, 2w, 3]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, lr: Var) -> Result<Var> {
        let mut h = self.head.forward(g, s, lr)?;
        h = g.gelu(h)?;
        for b in &self.blocks {
            h = b.forward(g, s, h)?;
        }
        let h = self.tail.forward(g, s, h)?;
        let h = g.pixel_shuffle(h, 2)?;
        g.sigmoid(h)
    }
}
