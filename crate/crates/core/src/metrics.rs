//! Image-quality and recognition metrics.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::priors::TextLabel;
use crate::real::Real;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("metric inputs differ in shape: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("accuracy over an empty set is undefined")]
    Empty,
    #[error("unknown tier {0:?}")]
    UnknownTier(alloc::string::String),
}

/// Blur-severity stratum of a test sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tier::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| MetricsError::UnknownTier(s.into()))
    }
}

fn check_shapes<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), MetricsError> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(MetricsError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// Mean squared error pooled over all pixels and channels.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, MetricsError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(1.0 / m)).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Reflect an out-of-range index about the edges without repeating the
/// edge sample (`-1 -> 1`, `n -> n-2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian filter of one `h x w` plane.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * plane[y * w + reflect_index(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[reflect_index(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM (11x11 Gaussian, sigma 1.5, reflective padding),
/// averaged over pixels, then over channels.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(c).map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(c).map(|v| v.as_f64()).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = blur(&pa, h, w, &taps);
        let mu_b = blur(&pb, h, w, &taps);
        let e_aa = blur(&prod(&pa, &pa), h, w, &taps);
        let e_bb = blur(&prod(&pb, &pb), h, w, &taps);
        let e_ab = blur(&prod(&pa, &pb), h, w, &taps);
        let mut s = 0.0;
        for i in 0..h * w {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            s += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += s / (h * w) as f64;
    }
    Ok(total / c as f64)
}

/// Per-sample evaluation outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub psnr_db: f64,
    pub ssim: f64,
    pub recognized: TextLabel,
    pub exact_match: bool,
    pub tier: Tier,
}

/// Case-insensitive exact string match.
pub fn label_matches(predicted: &str, truth: &str) -> bool {
    predicted.eq_ignore_ascii_case(truth)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    /// `(correct, total)` per tier, indexed by [`Tier::index`].
    pub per_tier: [(usize, usize); 3],
}

impl Accuracy {
    pub fn tier(&self, t: Tier) -> Option<f64> {
        let (ok, n) = self.per_tier[t.index()];
        (n > 0).then(|| ok as f64 / n as f64)
    }

    /// Sample-weighted mean over all tiers.
    pub fn overall(&self) -> f64 {
        let (ok, n) = self.per_tier.iter().fold((0, 0), |(a, b), &(c, d)| (a + c, b + d));
        ok as f64 / n as f64
    }

    pub fn total(&self) -> usize {
        self.per_tier.iter().map(|p| p.1).sum()
    }
}

/// Exact-match rate of `(predicted, truth, tier)` triples.
pub fn recognition_accuracy<'a, I>(items: I) -> Result<Accuracy, MetricsError>
where
    I: IntoIterator<Item = (&'a str, &'a str, Tier)>,
{
    let mut per_tier = [(0usize, 0usize); 3];
    for (p, t, tier) in items {
        let e = &mut per_tier[tier.index()];
        e.0 += usize::from(label_matches(p, t));
        e.1 += 1;
    }
    if per_tier.iter().all(|p| p.1 == 0) {
        return Err(MetricsError::Empty);
    }
    Ok(Accuracy { per_tier })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_img(rng: &mut Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, c], |_| rng.uniform())
    }

    /// Direct 11x11 window sums per pixel.
    fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let g1 = gaussian_window(11, 1.5);
        let mut total = 0.0;
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for ky in 0..11 {
                        for kx in 0..11 {
                            let wt = g1[ky] * g1[kx];
                            let yy = reflect_index(y as isize + ky as isize - 5, h);
                            let xx = reflect_index(x as isize + kx as isize - 5, w);
                            let (p, q) = (a.at(yy, xx, ch), b.at(yy, xx, ch));
                            ma += wt * p;
                            mb += wt * q;
                            aa += wt * p * p;
                            bb += wt * q * q;
                            ab += wt * p * q;
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    s += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                }
            }
            total += s / (h * w) as f64;
        }
        total / c as f64
    }

    fn naive_psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let mut s = 0.0;
        for y in 0..a.shape()[0] {
            for x in 0..a.shape()[1] {
                for c in 0..a.shape()[2] {
                    let d = a.at(y, x, c) - b.at(y, x, c);
                    s += d * d;
                }
            }
        }
        let m = s / a.len() as f64;
        if m == 0.0 {
            100.0
        } else {
            10.0 * (1.0 / m).log10()
        }
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<_> = (-4..9).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, [4, 3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn psnr_analytic_cases() {
        let z = Tensor::<f64>::zeros(&[4, 4, 3]);
        let o = Tensor::<f64>::full(&[4, 4, 3], 1.0);
        assert_eq!(psnr(&z, &z).unwrap(), 100.0);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
        let t = Tensor::<f64>::full(&[4, 4, 3], 0.1);
        assert!((psnr(&z, &t).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&z, &Tensor::zeros(&[4, 4, 1])).is_err());
    }

    #[test]
    fn metrics_match_naive_oracles_on_random_pairs() {
        let mut rng = Rng::new(21);
        for i in 0..50 {
            let (h, w) = if i % 2 == 0 { (16, 16) } else { (12, 20) };
            let a = rand_img(&mut rng, h, w, 3);
            let b = a.map(|v| (v + 0.2 * (rng.uniform() - 0.5)).clamp(0.0, 1.0));
            let (s, ns) = (ssim(&a, &b).unwrap(), naive_ssim(&a, &b));
            assert!((s - ns).abs() < 1e-9, "{s} vs {ns}");
            assert!((psnr(&a, &b).unwrap() - naive_psnr(&a, &b)).abs() < 1e-9);
            assert!((ssim(&b, &a).unwrap() - s).abs() < 1e-9);
            assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = Rng::new(22);
        let a = rand_img(&mut rng, 16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let (ca, cb) = (0.3, 0.7);
        let x = Tensor::<f64>::full(&[8, 8, 1], ca);
        let y = Tensor::<f64>::full(&[8, 8, 1], cb);
        let want = (2.0 * ca * cb + SSIM_C1) / (ca * ca + cb * cb + SSIM_C1);
        assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn accuracy_by_tier_recombines() {
        assert_eq!(recognition_accuracy(core::iter::empty()), Err(MetricsError::Empty));
        let items = [
            ("AB", "ab", Tier::Easy),
            ("AB", "AC", Tier::Easy),
            ("X1", "X1", Tier::Medium),
            ("", "Q", Tier::Hard),
            ("Q", "Q", Tier::Hard),
            ("Z", "Q", Tier::Hard),
        ];
        let acc = recognition_accuracy(items.iter().copied()).unwrap();
        assert_eq!(acc.tier(Tier::Easy), Some(0.5));
        assert_eq!(acc.tier(Tier::Medium), Some(1.0));
        let weighted: f64 = Tier::ALL
            .iter()
            .map(|&t| acc.tier(t).unwrap() * acc.per_tier[t.index()].1 as f64)
            .sum::<f64>()
            / acc.total() as f64;
        assert!((acc.overall() - weighted).abs() < 1e-12);
        assert!((acc.overall() - 0.5).abs() < 1e-12);
        let all = recognition_accuracy([("A", "A", Tier::Easy)]).unwrap();
        assert_eq!(all.overall(), 1.0);
        assert_eq!(all.tier(Tier::Hard), None);
    }

    #[test]
    fn tier_parses_round_trip() {
        for t in Tier::ALL {
            assert_eq!(t.as_str().parse::<Tier>().unwrap(), t);
        }
        assert!("extreme".parse::<Tier>().is_err());
    }
}
