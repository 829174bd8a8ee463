//! Synthetic paired text images.
//!
//! An HR sample is a two-colour render of a label in the fixed 8-cell
//! layout. Its LR partner is blurred, 2x box-downsampled and noised. Blur
//! strength sets the difficulty tier. Every tensor is quantized to 8 bits
//! on creation so in-memory samples equal their on-disk form.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::metrics::{reflect_index, Tier};
use crate::priors::{render_mask, GlyphAtlas, PriorError, TextLabel, CELLS, LABEL_CHARSET};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{HR_H, HR_W, LR_H, LR_W};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationConfig {
    /// Gaussian blur sigma (HR pixels) for easy, medium, hard.
    pub blur_sigma: [f64; 3],
    pub noise_sigma: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma: [0.5, 1.0, 1.5],
            noise_sigma: 0.01,
        }
    }
}

impl DegradationConfig {
    pub fn sigma(&self, tier: Tier) -> f64 {
        self.blur_sigma[tier.index()]
    }

    pub fn is_valid(&self) -> bool {
        let s = self.blur_sigma;
        s[0] > 0.0 && s[0] < s[1] && s[1] < s[2] && self.noise_sigma >= 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl core::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(alloc::format!("unknown split {s:?}")),
        }
    }
}

/// Identity of one sample; regenerating from it reproduces the pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSpec {
    pub id: usize,
    pub label: TextLabel,
    pub tier: Tier,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub spec: SampleSpec,
    /// `32x128x3`, values `k / 255`.
    pub hr: Tensor<f64>,
    /// `16x64x3`, values `k / 255`.
    pub lr: Tensor<f64>,
}

/// `round(v * 255)` after clamping to `[0, 1]`.
pub fn quantize(t: &Tensor<f64>) -> Vec<u8> {
    t.data().iter().map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect()
}

pub fn dequantize(bytes: &[u8], shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
}

fn quantized(t: Tensor<f64>) -> Tensor<f64> {
    let shape = t.shape().to_vec();
    dequantize(&quantize(&t), &shape)
}

/// Colour with the given luma and a small seeded tint.
fn tinted(rng: &mut Rng, luma: f64) -> [f64; 3] {
    let tint: [f64; 3] = core::array::from_fn(|_| rng.uniform_in(-0.08, 0.08));
    let tl: f64 = tint.iter().zip(LUMA).map(|(t, w)| t * w).sum();
    core::array::from_fn(|c| (luma + tint[c] - tl).clamp(0.0, 1.0))
}

/// HR render of `label`: background luma in `[0.1, 0.4]`, text luma in
/// `[0.6, 0.95]`, both drawn from `style_seed`.
pub fn render_hr(label: &TextLabel, style_seed: u64, atlas: &GlyphAtlas) -> Result<Tensor<f64>, PriorError> {
    let mut rng = Rng::new(style_seed).fork(0x5717e);
    let bg_luma = rng.uniform_in(0.1, 0.4);
    let bg = tinted(&mut rng, bg_luma);
    let fg_luma = rng.uniform_in(0.6, 0.95);
    let fg = tinted(&mut rng, fg_luma);
    let mask = render_mask::<f64>(label.as_str(), atlas)?;
    let mut out = Tensor::zeros(&[HR_H, HR_W, 3]);
    for (px, &m) in out.data_mut().chunks_exact_mut(3).zip(mask.data()) {
        px.copy_from_slice(if m > 0.5 { &fg } else { &bg });
    }
    Ok(quantized(out))
}

/// Normalized Gaussian taps truncated at `ceil(2 sigma)`.
pub fn blur_kernel(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(2.0 * sigma) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflective padding.
pub fn gaussian_blur(img: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let k = blur_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = Tensor::<f64>::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = k
                    .iter()
                    .enumerate()
                    .map(|(i, t)| t * img.at(y, reflect_index(x as isize + i as isize - r, w), ch))
                    .sum();
                tmp.set(y, x, ch, v);
            }
        }
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = k
                    .iter()
                    .enumerate()
                    .map(|(i, t)| t * tmp.at(reflect_index(y as isize + i as isize - r, h), x, ch))
                    .sum();
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

/// Mean of each 2x2 block.
pub fn box_downsample2(img: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, c) = (img.shape()[0] / 2, img.shape()[1] / 2, img.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let s = img.at(2 * y, 2 * x, ch)
                    + img.at(2 * y, 2 * x + 1, ch)
                    + img.at(2 * y + 1, 2 * x, ch)
                    + img.at(2 * y + 1, 2 * x + 1, ch);
                out.set(y, x, ch, 0.25 * s);
            }
        }
    }
    out
}

/// Blur, 2x box downsample, seeded Gaussian noise, clip to `[0, 1]`.
/// The result is not quantized.
pub fn degrade(hr: &Tensor<f64>, blur_sigma: f64, noise_sigma: f64, seed: u64) -> Tensor<f64> {
    let mut lr = box_downsample2(&gaussian_blur(hr, blur_sigma));
    let mut rng = Rng::new(seed).fork(0xde6);
    for v in lr.data_mut() {
        let n = if noise_sigma > 0.0 { noise_sigma * rng.normal() } else { 0.0 };
        *v = (*v + n).clamp(0.0, 1.0);
    }
    lr
}

/// Quantized `16x64x3` LR partner of an HR image.
pub fn degrade_to_lr(hr: &Tensor<f64>, cfg: &DegradationConfig, tier: Tier, seed: u64) -> Tensor<f64> {
    quantized(degrade(hr, cfg.sigma(tier), cfg.noise_sigma, seed))
}

fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Taps `(index, weight)` of output position `o` for a 2x upscale.
fn bicubic_taps(o: usize, n: usize) -> [(usize, f64); 4] {
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    let base = libm::floor(src);
    let frac = src - base;
    core::array::from_fn(|i| {
        let idx = (base as isize + i as isize - 1).clamp(0, n as isize - 1) as usize;
        (idx, cubic(frac - (i as f64 - 1.0)))
    })
}

/// 2x bicubic upsampling (Keys a = -0.5, half-pixel centres, clamped
/// edges), clipped to `[0, 1]`.
pub fn bicubic_upsample2(img: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(&[2 * h, 2 * w, c]);
    for y in 0..2 * h {
        let ty = bicubic_taps(y, h);
        for x in 0..2 * w {
            let tx = bicubic_taps(x, w);
            for ch in 0..c {
                let mut acc = 0.0;
                for &(iy, wy) in &ty {
                    for &(ix, wx) in &tx {
                        acc += wy * wx * img.at(iy, ix, ch);
                    }
                }
                out.set(y, x, ch, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Both images of a sample from its spec.
pub fn generate(spec: &SampleSpec, cfg: &DegradationConfig, atlas: &GlyphAtlas) -> Result<SamplePair, PriorError> {
    let hr = render_hr(&spec.label, spec.seed, atlas)?;
    let lr = degrade_to_lr(&hr, cfg, spec.tier, spec.seed);
    debug_assert_eq!(lr.shape(), &[LR_H, LR_W, 3]);
    Ok(SamplePair {
        spec: spec.clone(),
        hr,
        lr,
    })
}

/// Random label: length uniform in `1..=8`, characters uniform over
/// upper-case letters and digits.
pub fn random_label(rng: &mut Rng) -> TextLabel {
    let chars: Vec<char> = LABEL_CHARSET.chars().collect();
    let len = 1 + rng.below(CELLS);
    let s: String = (0..len).map(|_| chars[rng.below(chars.len())]).collect();
    TextLabel::new(&s).expect("charset label")
}

fn unique_labels(rng: &mut Rng, n: usize, taken: &mut BTreeSet<TextLabel>) -> Vec<TextLabel> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let l = random_label(rng);
        if taken.insert(l.clone()) {
            out.push(l);
        }
    }
    out
}

/// Sample specs of a dataset: `n_train` training samples cycling through
/// the tiers, then `n_test_per_tier` test samples per tier. All labels are
/// distinct, so train and test labels are disjoint.
pub fn dataset_plan(n_train: usize, n_test_per_tier: usize, master_seed: u64) -> Vec<SampleSpec> {
    let root = Rng::new(master_seed);
    let mut taken = BTreeSet::new();
    let train = unique_labels(&mut root.fork(1), n_train, &mut taken);
    let test = unique_labels(&mut root.fork(2), 3 * n_test_per_tier, &mut taken);
    let mut seeds = root.fork(3);
    let mut specs = Vec::with_capacity(train.len() + test.len());
    for (i, label) in train.into_iter().enumerate() {
        specs.push(SampleSpec {
            id: specs.len(),
            label,
            tier: Tier::ALL[i % 3],
            split: Split::Train,
            seed: seeds.next_u64(),
        });
    }
    for (i, label) in test.into_iter().enumerate() {
        specs.push(SampleSpec {
            id: specs.len(),
            label,
            tier: Tier::ALL[i / n_test_per_tier.max(1)],
            split: Split::Test,
            seed: seeds.next_u64(),
        });
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::priors::recognize;

    fn label(s: &str) -> TextLabel {
        TextLabel::new(s).unwrap()
    }

    #[test]
    fn render_is_deterministic_and_two_level() {
        let atlas = GlyphAtlas::builtin();
        let a = render_hr(&label("HI"), 7, &atlas).unwrap();
        let b = render_hr(&label("HI"), 7, &atlas).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[32, 128, 3]);
        let blank = render_hr(&label(""), 7, &atlas).unwrap();
        let bg = &blank.data()[..3];
        assert!(blank.data().chunks_exact(3).all(|p| p == bg));
        assert_eq!(&a.data()[..3], bg);
        let luma = |p: &[f64]| p.iter().zip(LUMA).map(|(v, w)| v * w).sum::<f64>();
        assert!((0.09..=0.41).contains(&luma(bg)));
    }

    #[test]
    fn recognizer_is_exact_on_hr_renders() {
        let atlas = GlyphAtlas::builtin();
        let mut rng = Rng::new(99);
        for i in 0..500 {
            let l = random_label(&mut rng);
            let hr = render_hr(&l, i, &atlas).unwrap();
            assert_eq!(recognize(&hr, &atlas).unwrap().label, l);
        }
    }

    #[test]
    fn noiseless_degradation_limit_is_box_downsample() {
        let mut rng = Rng::new(4);
        let hr = Tensor::from_fn(&[32, 128, 3], |_| rng.uniform());
        let lr = degrade(&hr, 0.0, 0.0, 1);
        assert_eq!(lr, box_downsample2(&hr));
        let tiny = degrade(&hr, 1e-3, 0.0, 1);
        for (a, b) in tiny.data().iter().zip(lr.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_kernel_is_truncated_at_two_sigma() {
        assert_eq!(blur_kernel(0.5).len(), 3);
        assert_eq!(blur_kernel(1.0).len(), 5);
        assert_eq!(blur_kernel(1.5).len(), 7);
        assert!((blur_kernel(1.5).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lr_values_are_clipped_quantized() {
        let atlas = GlyphAtlas::builtin();
        let cfg = DegradationConfig {
            noise_sigma: 0.5,
            ..Default::default()
        };
        let hr = render_hr(&label("ABC"), 3, &atlas).unwrap();
        let lr = degrade_to_lr(&hr, &cfg, Tier::Hard, 3);
        assert_eq!(lr.shape(), &[16, 64, 3]);
        for &v in lr.data() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(f64::from(libm::round(v * 255.0) as u8) / 255.0, v);
        }
    }

    #[test]
    fn bicubic_preserves_constants_and_doubles_size() {
        let c = Tensor::full(&[4, 5, 3], 0.3);
        let up = bicubic_upsample2(&c);
        assert_eq!(up.shape(), &[8, 10, 3]);
        assert!(up.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let taps = bicubic_taps(3, 10);
        assert!((taps.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn harder_tiers_lose_more_fidelity() {
        let atlas = GlyphAtlas::builtin();
        let cfg = DegradationConfig::default();
        let mut rng = Rng::new(5);
        let mut sums = [0.0; 3];
        for i in 0..100 {
            let l = random_label(&mut rng);
            let hr = render_hr(&l, i, &atlas).unwrap();
            for t in Tier::ALL {
                let lr = degrade_to_lr(&hr, &cfg, t, i);
                sums[t.index()] += psnr(&bicubic_upsample2(&lr), &hr).unwrap();
            }
        }
        assert!(sums[0] > sums[1] && sums[1] > sums[2], "{sums:?}");
    }

    #[test]
    fn plan_is_deterministic_disjoint_and_stratified() {
        let a = dataset_plan(300, 40, 11);
        assert_eq!(a, dataset_plan(300, 40, 11));
        assert_ne!(a, dataset_plan(300, 40, 12));
        assert_eq!(a.len(), 420);
        let train: BTreeSet<_> = a.iter().filter(|s| s.split == Split::Train).map(|s| &s.label).collect();
        let test: Vec<_> = a.iter().filter(|s| s.split == Split::Test).collect();
        assert!(test.iter().all(|s| !train.contains(&s.label)));
        for t in Tier::ALL {
            assert_eq!(test.iter().filter(|s| s.tier == t).count(), 40);
        }
        assert!(a.iter().enumerate().all(|(i, s)| s.id == i && !s.label.is_empty()));
    }

    #[test]
    fn regeneration_is_bitwise() {
        let atlas = GlyphAtlas::builtin();
        let cfg = DegradationConfig::default();
        let plan = dataset_plan(6, 2, 3);
        for s in &plan {
            assert_eq!(generate(s, &cfg, &atlas).unwrap(), generate(s, &cfg, &atlas).unwrap());
        }
    }
}
