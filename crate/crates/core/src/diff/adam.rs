use super::params::{ParamStore, Parameter};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update on every non-frozen parameter, then
/// zeroes the gradients. Frozen parameters are left bitwise untouched.
pub fn adam_step<'a, T: Real>(params: impl IntoIterator<Item = &'a mut Parameter<T>>, cfg: &AdamConfig) {
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
    for p in params {
        if p.frozen {
            continue;
        }
        p.step += 1;
        let t = p.step as i32;
        let c1 = T::one() - T::from_f64(libm::pow(cfg.beta1, t as f64));
        let c2 = T::one() - T::from_f64(libm::pow(cfg.beta2, t as f64));
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = p.grad[i];
            p.adam_m[i] = b1 * p.adam_m[i] + (T::one() - b1) * g;
            p.adam_v[i] = b2 * p.adam_v[i] + (T::one() - b2) * g * g;
            let mh = p.adam_m[i] / c1;
            let vh = p.adam_v[i] / c2;
            values[i] -= lr * mh / (vh.sqrt() + eps);
            p.grad[i] = T::zero();
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        adam_step(self.iter_mut(), cfg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::new(&[1], alloc::vec![0.0]));
        s.get_mut(id).grad[0] = 1.0;
        s.adam_step(&AdamConfig::default());
        let v = s.get(id).value.data()[0];
        assert!((v + 1e-3).abs() < 1e-10, "{v}");
        assert_eq!(s.get(id).grad[0], 0.0);
        assert_eq!(s.get(id).step, 1);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::new(&[2], alloc::vec![0.3, -0.2]));
        let b = s.add("b", Tensor::new(&[2], alloc::vec![0.3, -0.2]));
        for step in 0..5 {
            for id in [a, b] {
                s.get_mut(id).grad = alloc::vec![0.1 * step as f64, -0.7];
            }
            s.adam_step(&AdamConfig::default());
        }
        assert_eq!(s.get(a).value, s.get(b).value);
    }

    #[test]
    fn frozen_untouched_and_empty_is_noop() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::new(&[1], alloc::vec![0.5]));
        s.set_frozen(true);
        s.get_mut(a).grad[0] = 3.0;
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.get(a).value.data()[0].to_bits(), 0.5f32.to_bits());
        let mut empty = ParamStore::<f32>::new();
        empty.adam_step(&AdamConfig::default());
    }
}
