//! Central finite-difference gradient estimates, the reference against which
//! every analytic gradient is checked.

use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every listed parameter.
///
/// Parameters are perturbed in place and restored bit-exactly afterwards.
pub fn finite_difference_gradient<F>(
    mut f: F,
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
) -> Result<Vec<Matrix>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Numeric(format!("step size {h} must be positive")));
    }
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let (rows, cols) = store.value(id).shape();
        let mut grad = Matrix::zeros(rows, cols);
        for k in 0..rows * cols {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = f(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = f(store);
            store.value_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective while perturbing {}[{k}]",
                    store.get(id).name
                )));
            }
            grad.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `‖a − n‖ / (max(‖a‖, ‖n‖) + guard)`, Frobenius norms.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix, guard: f64) -> Result<f64> {
    let diff = analytic.sub(numeric)?.frobenius_norm();
    Ok(diff / (analytic.frobenius_norm().max(numeric.frobenius_norm()) + guard))
}
