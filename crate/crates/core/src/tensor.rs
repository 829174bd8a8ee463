use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Dense row-major array. Images use `[height, width, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Panics when `data.len()` disagrees with `shape`.
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    /// `(h, w, c)` of a rank-3 image tensor.
    pub fn hwc(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected an HxWxC image, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c] = v;
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Replicates a single-channel image to `c` channels.
    pub fn expand_channels(&self, c: usize) -> Self {
        let (h, w, ch) = self.hwc();
        assert_eq!(ch, 1);
        let mut data = Vec::with_capacity(h * w * c);
        for &v in &self.data {
            data.extend(core::iter::repeat(v).take(c));
        }
        Tensor::new(&[h, w, c], data)
    }

    /// Stacks images of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Self {
        let (h, w, _) = parts[0].hwc();
        let total: usize = parts.iter().map(|p| p.hwc().2).sum();
        let mut data = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for p in parts {
                let (ph, pw, pc) = p.hwc();
                assert_eq!((ph, pw), (h, w));
                data.extend_from_slice(&p.data[px * pc..(px + 1) * pc]);
            }
        }
        Tensor::new(&[h, w, total], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
