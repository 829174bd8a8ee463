use alloc::vec::Vec;

use super::PriorError;
use crate::real::Real;
use crate::tensor::Tensor;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Per-pixel luma quantized to 256 bins, plus the raw luma values.
///
/// Single-channel inputs are taken as luma directly.
pub fn luma_bins<T: Real>(image: &Tensor<T>) -> Result<(Vec<u8>, Vec<f64>), PriorError> {
    if image.shape().len() != 3 || !matches!(image.shape()[2], 1 | 3) {
        return Err(PriorError::Shape {
            expected: "HxWx1 or HxWx3",
            got: image.shape().to_vec(),
        });
    }
    let c = image.shape()[2];
    let mut bins = Vec::with_capacity(image.len() / c);
    let mut lumas = Vec::with_capacity(image.len() / c);
    for px in image.data().chunks_exact(c) {
        let l = if c == 1 {
            px[0].as_f64()
        } else {
            px.iter().zip(LUMA).map(|(v, w)| v.as_f64().clamp(0.0, 1.0) * w).sum()
        };
        let l = l.clamp(0.0, 1.0);
        lumas.push(l);
        bins.push(libm::round(l * 255.0) as u8);
    }
    Ok((bins, lumas))
}

/// Otsu threshold bin: the first `t` in `1..=255` maximizing the
/// between-class variance of `{bin < t}` vs `{bin >= t}`. `None` when only
/// one class is ever populated.
pub fn otsu_threshold(bins: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &b in bins {
        hist[b as usize] += 1;
    }
    let total = bins.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let mut best: Option<(u8, f64)> = None;
    for t in 1..256usize {
        w0 += hist[t - 1] as f64;
        sum0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Otsu binarization on luma; bright pixels (bin at or above the
/// threshold) become 1. Near-constant images (luma variance below 1e-6)
/// map to all zeros. Output is `HxWx1`.
pub fn binarize<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>, PriorError> {
    let (bins, lumas) = luma_bins(image)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let n = lumas.len().max(1) as f64;
    let mean = lumas.iter().sum::<f64>() / n;
    let var = lumas.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    let mut out = Tensor::zeros(&[h, w, 1]);
    if var < 1e-6 {
        return Ok(out);
    }
    if let Some(t) = otsu_threshold(&bins) {
        for (o, &b) in out.data_mut().iter_mut().zip(&bins) {
            if b >= t {
                *o = T::one();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Threshold sweep straight from the pixel list.
    fn brute_force_otsu(bins: &[u8]) -> Option<u8> {
        let mut best: Option<(u8, f64)> = None;
        for t in 1..=255u8 {
            let lo: Vec<f64> = bins.iter().filter(|&&b| b < t).map(|&b| b as f64).collect();
            let hi: Vec<f64> = bins.iter().filter(|&&b| b >= t).map(|&b| b as f64).collect();
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
            let v = lo.len() as f64 * hi.len() as f64 * (m0 - m1) * (m0 - m1);
            if best.is_none_or(|(_, b)| v > b * (1.0 + 1e-12)) {
                best = Some((t, v));
            }
        }
        best.map(|(t, _)| t)
    }

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[h, w, 3]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    t.set(y, x, c, f(y, x));
                }
            }
        }
        t
    }

    #[test]
    fn two_level_image_gives_glyph_support() {
        let support = |y: usize, x: usize| (x / 3 + y) % 4 == 0;
        let img = gray(32, 128, |y, x| if support(y, x) { 0.9 } else { 0.2 });
        let (bins, _) = luma_bins(&img).unwrap();
        let t = otsu_threshold(&bins).unwrap();
        let bf = brute_force_otsu(&bins).unwrap();
        // any threshold separating the two levels yields the same partition
        let part = |t: u8| bins.iter().map(|&b| b >= t).collect::<Vec<_>>();
        assert_eq!(part(t), part(bf));
        let m = binarize(&img).unwrap();
        for y in 0..32 {
            for x in 0..128 {
                assert_eq!(m.at(y, x, 0) == 1.0, support(y, x));
            }
        }
    }

    #[test]
    fn otsu_matches_brute_force_on_random_histograms() {
        let mut rng = Rng::new(3);
        for _ in 0..30 {
            let bins: Vec<u8> = (0..500)
                .map(|_| {
                    let mode = if rng.uniform() < 0.3 { 200.0 } else { 60.0 };
                    (mode + 30.0 * rng.normal()).clamp(0.0, 255.0) as u8
                })
                .collect();
            let a = otsu_threshold(&bins).unwrap();
            let b = brute_force_otsu(&bins).unwrap();
            let part = |t: u8| bins.iter().filter(|&&x| x >= t).count();
            assert_eq!(part(a), part(b), "thresholds {a} vs {b}");
        }
    }

    #[test]
    fn constant_image_is_all_zero() {
        let m = binarize(&gray(32, 128, |_, _| 0.5)).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binarization_is_idempotent() {
        let mut rng = Rng::new(11);
        let img = Tensor::<f64>::from_fn(&[32, 128, 3], |_| rng.uniform());
        let once = binarize(&img).unwrap();
        let twice = binarize(&once.expand_channels(3)).unwrap();
        assert_eq!(once, twice);
        let again = binarize(&once).unwrap();
        assert_eq!(once, again);
    }

    #[test]
    fn rejects_bad_channel_count() {
        let img = Tensor::<f64>::zeros(&[32, 128, 2]);
        assert!(matches!(binarize(&img), Err(PriorError::Shape { .. })));
    }
}
