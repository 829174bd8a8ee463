use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::render::{glyph_cell_pixel, CELLS, CELL_SIZE, LINE_TOP};
use super::{binarize, check_hr, Bitmap, GlyphAtlas, PriorError, TextLabel, GLYPH_PIXELS, GLYPH_W};
use crate::real::Real;
use crate::tensor::Tensor;

/// Cells whose best glyph match scores below this end the label.
pub const BLANK_THRESHOLD: f64 = 0.55;

#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub label: TextLabel,
    /// Match score of every emitted character.
    pub scores: Vec<f64>,
}

/// Block-majority downscale of one cell of a binary mask to a 5x7 bitmap.
pub fn downscale_cell<T: Real>(mask: &Tensor<T>, cell: usize) -> Bitmap {
    let mut on = [0u32; GLYPH_PIXELS];
    let mut total = [0u32; GLYPH_PIXELS];
    for py in 0..CELL_SIZE {
        for px in 0..CELL_SIZE {
            if let Some((gy, gx)) = glyph_cell_pixel(py, px) {
                let k = gy * GLYPH_W + gx;
                total[k] += 1;
                if mask.at(LINE_TOP + py, cell * CELL_SIZE + px, 0) > T::from_f64(0.5) {
                    on[k] += 1;
                }
            }
        }
    }
    let mut bm = [0u8; GLYPH_PIXELS];
    for k in 0..GLYPH_PIXELS {
        bm[k] = u8::from(2 * on[k] > total[k]);
    }
    bm
}

/// Agreement of two bitmaps restricted to their lit pixels:
/// `|a AND b| / |a OR b|`, 0 when both are blank.
pub fn glyph_match(a: &Bitmap, b: &Bitmap) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for (&x, &y) in a.iter().zip(b) {
        inter += u32::from(x & y);
        union += u32::from(x | y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Template recognizer for the fixed 8-cell layout.
///
/// The whole image is binarized once; each cell is downscaled to 5x7 and
/// matched against every atlas glyph. The best glyph (first in charset
/// order on ties) is emitted upper-cased; the first cell scoring below
/// [`BLANK_THRESHOLD`] terminates the label.
pub fn recognize<T: Real>(image: &Tensor<T>, atlas: &GlyphAtlas) -> Result<Recognition, PriorError> {
    check_hr(image)?;
    let mask = binarize(image)?;
    let mut text = String::new();
    let mut scores = vec![];
    for cell in 0..CELLS {
        let bm = downscale_cell(&mask, cell);
        let mut best = (0.0f64, ' ');
        for (ch, g) in atlas.glyphs() {
            let s = glyph_match(&bm, g);
            if s > best.0 {
                best = (s, *ch);
            }
        }
        if best.0 < BLANK_THRESHOLD {
            break;
        }
        text.push(best.1.to_ascii_uppercase());
        scores.push(best.0);
    }
    Ok(Recognition {
        label: TextLabel::new(&text)?,
        scores,
    })
}
