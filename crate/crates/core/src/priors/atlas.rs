use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::PriorError;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
pub const GLYPH_PIXELS: usize = GLYPH_W * GLYPH_H;

/// Atlas character order; also the recognizer's tie-break order.
pub const CHARSET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

/// Characters allowed in a [`TextLabel`](super::TextLabel).
pub const LABEL_CHARSET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

const BUILTIN: &str = include_str!("../../fixtures/glyphs_5x7.txt");

pub type Bitmap = [u8; GLYPH_PIXELS];

/// 5x7 binary bitmaps for the 62-character charset, in [`CHARSET`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphAtlas {
    glyphs: Vec<(char, Bitmap)>,
}

impl GlyphAtlas {
    /// The atlas shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("builtin atlas is valid")
    }

    /// Parses `<char> <35 binary digits>` lines (row-major 5x7) and
    /// validates that every charset glyph is present exactly once and that
    /// no two bitmaps coincide.
    pub fn parse(text: &str) -> Result<Self, PriorError> {
        let mut found: Vec<Option<Bitmap>> = alloc::vec![None; CHARSET.len()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| PriorError::BadAtlas(format!("line {}: {why}", lineno + 1));
            let mut parts = line.split_whitespace();
            let ch_str = parts.next().ok_or_else(|| bad("missing character"))?;
            let bits = parts.next().ok_or_else(|| bad("missing bitmap"))?;
            if parts.next().is_some() {
                return Err(bad("trailing fields"));
            }
            let mut chars = ch_str.chars();
            let ch = chars.next().ok_or_else(|| bad("missing character"))?;
            if chars.next().is_some() {
                return Err(bad("character field longer than one char"));
            }
            let slot = CHARSET.find(ch).ok_or_else(|| bad("character outside charset"))?;
            if bits.len() != GLYPH_PIXELS {
                return Err(bad("bitmap must have 35 digits"));
            }
            let mut bm = [0u8; GLYPH_PIXELS];
            for (i, b) in bits.bytes().enumerate() {
                bm[i] = match b {
                    b'0' => 0,
                    b'1' => 1,
                    _ => return Err(bad("bitmap digits must be 0 or 1")),
                };
            }
            if found[slot].replace(bm).is_some() {
                return Err(bad("duplicate character"));
            }
        }
        let mut glyphs = Vec::with_capacity(CHARSET.len());
        for (slot, ch) in CHARSET.chars().enumerate() {
            let bm = found[slot].ok_or_else(|| PriorError::BadAtlas(format!("missing glyph {ch:?}")))?;
            if let Some((other, _)) = glyphs.iter().find(|(_, b)| *b == bm) {
                return Err(PriorError::BadAtlas(format!("glyphs {other:?} and {ch:?} are identical")));
            }
            glyphs.push((ch, bm));
        }
        Ok(Self { glyphs })
    }

    /// Serializes back to the fixture text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (ch, bm) in &self.glyphs {
            s.push(*ch);
            s.push(' ');
            for &b in bm {
                s.push(if b == 1 { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn glyph(&self, ch: char) -> Option<&Bitmap> {
        self.glyphs.iter().find(|(c, _)| *c == ch).map(|(_, b)| b)
    }

    /// Glyphs in charset order.
    pub fn glyphs(&self) -> &[(char, Bitmap)] {
        &self.glyphs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_atlas_satisfies_invariants() {
        let a = GlyphAtlas::builtin();
        assert_eq!(a.glyphs().len(), 62);
        for ch in CHARSET.chars() {
            let g = a.glyph(ch).unwrap();
            assert!(g.iter().all(|&b| b <= 1));
            assert!(g.iter().any(|&b| b == 1), "{ch} is blank");
        }
        assert_eq!(GlyphAtlas::parse(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn loader_rejects_bad_atlases() {
        let text = GlyphAtlas::builtin().to_text();
        let missing: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(GlyphAtlas::parse(&missing), Err(PriorError::BadAtlas(_))));
        let a_bits = &text.lines().next().unwrap()[2..];
        let dup: String = text
            .lines()
            .map(|l| if l.starts_with("B ") { format!("B {a_bits}\n") } else { format!("{l}\n") })
            .collect();
        match GlyphAtlas::parse(&dup) {
            Err(PriorError::BadAtlas(msg)) => assert!(msg.contains("identical"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let bad_digit = text.replacen("A 0", "A 2", 1);
        assert!(GlyphAtlas::parse(&bad_digit).is_err());
    }
}
