//! Image-level priors: the structure mask (binarization) and the graphic
//! render of the recognized text.
//!
//! None of these functions are differentiable. Callers feed their outputs
//! into a graph as constants, so no gradient ever flows through them.

mod atlas;
mod binarize;
mod recognize;
mod render;

use alloc::string::String;

pub use atlas::{Bitmap, GlyphAtlas, CHARSET, GLYPH_H, GLYPH_PIXELS, GLYPH_W, LABEL_CHARSET};
pub use binarize::{binarize, luma_bins, otsu_threshold};
pub use recognize::{downscale_cell, glyph_match, recognize, Recognition, BLANK_THRESHOLD};
pub use render::{glyph_cell_pixel, render_graphic_prior, render_mask, CELLS, CELL_SIZE, LINE_TOP};

use crate::real::Real;
use crate::tensor::Tensor;
use crate::{HR_H, HR_W};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PriorError {
    #[error("expected image shape {expected}, got {got:?}")]
    Shape { expected: &'static str, got: alloc::vec::Vec<usize> },
    #[error("character {0:?} is outside the charset")]
    UnknownChar(char),
    #[error("label has {0} characters, at most 8 fit the layout")]
    TooLong(usize),
    #[error("invalid glyph atlas: {0}")]
    BadAtlas(String),
}

/// Upper-case alphanumeric string of at most [`CELLS`] characters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TextLabel(String);

impl TextLabel {
    pub fn new(text: &str) -> Result<Self, PriorError> {
        let n = text.chars().count();
        if n > CELLS {
            return Err(PriorError::TooLong(n));
        }
        if let Some(c) = text.chars().find(|c| !LABEL_CHARSET.contains(*c)) {
            return Err(PriorError::UnknownChar(c));
        }
        Ok(Self(String::from(text)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl core::fmt::Display for TextLabel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Which prior a refinement branch consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PriorKind {
    /// 2-channel upper/lower-case render of the recognized text.
    Graphic,
    /// 1-channel binarization mask.
    Structure,
    /// Mask and render stacked into one 3-channel prior.
    Concat,
}

impl PriorKind {
    pub fn channels(self) -> usize {
        match self {
            PriorKind::Graphic => 2,
            PriorKind::Structure => 1,
            PriorKind::Concat => 3,
        }
    }
}

/// The two priors of one refinement step.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorPair<T> {
    /// `32x128x2`, channel 0 upper-case, channel 1 lower-case render.
    pub graphic: Tensor<T>,
    /// `32x128x1` binary mask.
    pub structure: Tensor<T>,
}

fn check_hr<T: Real>(image: &Tensor<T>) -> Result<(), PriorError> {
    if image.shape() != [HR_H, HR_W, 3] {
        return Err(PriorError::Shape {
            expected: "32x128x3",
            got: image.shape().to_vec(),
        });
    }
    Ok(())
}

/// `graphic = render(recognize(image))`, `structure = binarize(image)`.
pub fn make_priors<T: Real>(image: &Tensor<T>, atlas: &GlyphAtlas) -> Result<PriorPair<T>, PriorError> {
    check_hr(image)?;
    let structure = binarize(image)?;
    let graphic = graphic_prior(image, atlas)?;
    Ok(PriorPair { graphic, structure })
}

/// Graphic prior only.
pub fn graphic_prior<T: Real>(image: &Tensor<T>, atlas: &GlyphAtlas) -> Result<Tensor<T>, PriorError> {
    check_hr(image)?;
    let rec = recognize(image, atlas)?;
    render_graphic_prior(rec.label.as_str(), atlas)
}

/// The prior a branch of the given kind consumes.
pub fn prior_for<T: Real>(kind: PriorKind, image: &Tensor<T>, atlas: &GlyphAtlas) -> Result<Tensor<T>, PriorError> {
    match kind {
        PriorKind::Structure => {
            check_hr(image)?;
            binarize(image)
        }
        PriorKind::Graphic => graphic_prior(image, atlas),
        PriorKind::Concat => {
            let p = make_priors(image, atlas)?;
            Ok(Tensor::concat_channels(&[&p.structure, &p.graphic]))
        }
    }
}
