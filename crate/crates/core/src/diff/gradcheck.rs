use alloc::string::String;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::Result;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
    pub abs_floor: f64,
    /// Entries checked per parameter tensor (random subset when smaller).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
    pub non_finite: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| !p.non_finite && p.max_rel_err <= self.tol)
    }
}

/// Compares analytic gradients of `build` (which must return a scalar loss
/// node) against central finite differences for every non-frozen parameter.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, opts: &GradcheckOptions, mut build: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss)?;
    store.zero_grads();
    store.accumulate_grads(&g, 1.0);
    drop(g);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = build(&mut g, store)?;
        Ok(g.scalar(loss))
    };

    let mut rng = Rng::new(opts.seed);
    let mut report = GradcheckReport {
        params: Vec::new(),
        tol: opts.tol,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).frozen {
            continue;
        }
        let n = store.get(id).value.len();
        let mut entries: Vec<usize> = (0..n).collect();
        if let Some(m) = opts.max_entries {
            if m < n {
                rng.shuffle(&mut entries);
                entries.truncate(m);
                entries.sort_unstable();
            }
        }
        let analytic = store.get(id).grad.clone();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: entries.len(),
            max_rel_err: 0.0,
            max_abs_grad: analytic.iter().fold(0.0, |m, v| f64::max(m, v.abs())),
            non_finite: false,
        };
        for &i in &entries {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            if !numeric.is_finite() {
                check.non_finite = true;
                continue;
            }
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            check.max_rel_err = check.max_rel_err.max((a - numeric).abs() / denom);
        }
        report.params.push(check);
    }
    store.zero_grads();
    Ok(report)
}
