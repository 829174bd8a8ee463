use super::{GlyphAtlas, PriorError, GLYPH_H, GLYPH_W};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{HR_H, HR_W};

/// Character cells across the image.
pub const CELLS: usize = 8;
/// Cells are `CELL_SIZE x CELL_SIZE`; the glyph occupies the inner
/// `(CELL_SIZE - 2)` square (one pixel margin).
pub const CELL_SIZE: usize = 16;

/// First image row of the (vertically centred) text line.
pub const LINE_TOP: usize = (HR_H - CELL_SIZE) / 2;

const INNER: usize = CELL_SIZE - 2;

/// Glyph pixel `(gy, gx)` covering cell-local pixel `(py, px)`, if any.
#[inline]
pub fn glyph_cell_pixel(py: usize, px: usize) -> Option<(usize, usize)> {
    if py == 0 || px == 0 || py > INNER || px > INNER {
        return None;
    }
    Some(((py - 1) * GLYPH_H / INNER, (px - 1) * GLYPH_W / INNER))
}

/// Binary `32x128x1` rasterization of `text` (any atlas characters, case
/// preserved) in the fixed left-aligned 8-cell layout, vertically centred.
pub fn render_mask<T: Real>(text: &str, atlas: &GlyphAtlas) -> Result<Tensor<T>, PriorError> {
    let n = text.chars().count();
    if n > CELLS {
        return Err(PriorError::TooLong(n));
    }
    let mut out = Tensor::zeros(&[HR_H, HR_W, 1]);
    for (cell, ch) in text.chars().enumerate() {
        let glyph = atlas.glyph(ch).ok_or(PriorError::UnknownChar(ch))?;
        for py in 0..CELL_SIZE {
            for px in 0..CELL_SIZE {
                if let Some((gy, gx)) = glyph_cell_pixel(py, px) {
                    if glyph[gy * GLYPH_W + gx] == 1 {
                        out.set(LINE_TOP + py, cell * CELL_SIZE + px, 0, T::one());
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `32x128x2` graphic prior: channel 0 renders `label` in upper case,
/// channel 1 in lower case (digits are identical in both).
pub fn render_graphic_prior<T: Real>(label: &str, atlas: &GlyphAtlas) -> Result<Tensor<T>, PriorError> {
    let upper: alloc::string::String = label.chars().map(|c| c.to_ascii_uppercase()).collect();
    let lower: alloc::string::String = label.chars().map(|c| c.to_ascii_lowercase()).collect();
    let a = render_mask::<T>(&upper, atlas)?;
    let b = render_mask::<T>(&lower, atlas)?;
    Ok(Tensor::concat_channels(&[&a, &b]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::LABEL_CHARSET;

    #[test]
    fn a1_renders_upper_and_lower_channels() {
        let atlas = GlyphAtlas::builtin();
        let p = render_graphic_prior::<f64>("A1", &atlas).unwrap();
        assert_eq!(p.shape(), &[32, 128, 2]);
        let expect = |ch: char, cell: usize, c: usize| {
            let g = atlas.glyph(ch).unwrap();
            for py in 0..16 {
                for px in 0..16 {
                    let want = glyph_cell_pixel(py, px).map_or(0.0, |(gy, gx)| g[gy * 5 + gx] as f64);
                    assert_eq!(p.at(LINE_TOP + py, cell * 16 + px, c), want, "{ch} at ({py},{px})");
                }
            }
        };
        expect('A', 0, 0);
        expect('1', 1, 0);
        expect('a', 0, 1);
        expect('1', 1, 1);
        for y in 0..32 {
            for x in 32..128 {
                assert_eq!(p.at(y, x, 0), 0.0);
                assert_eq!(p.at(y, x, 1), 0.0);
            }
        }
        let outside = (0..LINE_TOP).chain(LINE_TOP + 16..32);
        assert!(outside.into_iter().all(|y| (0..128).all(|x| p.at(y, x, 0) == 0.0)));
    }

    #[test]
    fn empty_label_is_blank() {
        let p = render_graphic_prior::<f32>("", &GlyphAtlas::builtin()).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_character_renders_are_distinct() {
        let atlas = GlyphAtlas::builtin();
        let renders: alloc::vec::Vec<_> = LABEL_CHARSET
            .chars()
            .map(|c| render_graphic_prior::<f32>(&alloc::format!("{c}"), &atlas).unwrap())
            .collect();
        for i in 0..renders.len() {
            for j in i + 1..renders.len() {
                let ci: alloc::vec::Vec<f32> = renders[i].data().iter().step_by(2).copied().collect();
                let cj: alloc::vec::Vec<f32> = renders[j].data().iter().step_by(2).copied().collect();
                assert_ne!(ci, cj);
            }
        }
    }

    #[test]
    fn rejects_unknown_chars() {
        let atlas = GlyphAtlas::builtin();
        assert_eq!(render_graphic_prior::<f32>("A-B", &atlas), Err(PriorError::UnknownChar('-')));
        assert_eq!(render_graphic_prior::<f32>("ABCDEFGHI", &atlas), Err(PriorError::TooLong(9)));
    }
}
