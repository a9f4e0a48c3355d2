//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{Gradients, ParamStore};
use crate::error::bail_arg;
use crate::{Result, Scalar};

/// Relative-error denominators never drop below this, so entries whose true
/// gradient is ~0 are judged on absolute error instead. In f64 with a loss of
/// order one and ε ≈ 1e-4, cancellation in `(L+ − L−)/2ε` contributes about
/// 1e-16/1e-4 = 1e-12, far below the floor.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst error per parameter tensor, by name.
    pub per_tensor: Vec<(String, f64)>,
    pub weights_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares `loss`'s gradients against central differences on up to
/// `per_tensor` random weights of every parameter tensor.
pub fn check_gradients<T, F, R>(
    store: &mut ParamStore<T>,
    loss: F,
    epsilon: T,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&ParamStore<T>) -> Result<(T, Gradients<T>)>,
    R: Rng + ?Sized,
{
    if !(epsilon > T::zero()) {
        bail_arg!("finite-difference epsilon must be positive, got {epsilon}");
    }
    let (_, grads) = loss(store)?;
    let two_eps = (epsilon + epsilon).as_f64();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_tensor: Vec::new(),
        weights_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.tensor(id).len();
        let analytic = grads.get(id);
        let mut worst = 0.0f64;
        for i in sample(rng, n, per_tensor.min(n)) {
            let orig = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = orig + epsilon;
            let plus = loss(store)?.0;
            store.tensor_mut(id).data_mut()[i] = orig - epsilon;
            let minus = loss(store)?.0;
            store.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus).as_f64() / two_eps;
            let a = analytic.map_or(0.0, |g| g[i].as_f64());
            worst = worst.max(relative_error(a, numeric));
            report.weights_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.push((store.name(id).to_string(), worst));
    }
    Ok(report)
}
