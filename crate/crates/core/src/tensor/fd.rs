use crate::error::{HyprError, Result};
use crate::scalar::Scalar;

/// Central-difference Jacobian of `f` at `x`.
///
/// Returns the row-major `n_out × n_in` matrix whose entry `(r, c)` is
/// `(f(x + h e_c)[r] - f(x - h e_c)[r]) / 2h`.
pub fn finite_difference_jacobian<T: Scalar>(
    f: impl Fn(&[T]) -> Vec<T>,
    x: &[T],
    h: T,
) -> Result<Vec<Vec<T>>> {
    if !h.is_finite() || h <= T::zero() {
        return Err(HyprError::config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let base = f(x);
    if base.iter().any(|v| !v.is_finite()) {
        return Err(HyprError::non_finite());
    }
    let n_out = base.len();
    let mut jac = vec![vec![T::zero(); x.len()]; n_out];
    let mut probe = x.to_vec();
    for c in 0..x.len() {
        probe[c] = x[c] + h;
        let plus = f(&probe);
        probe[c] = x[c] - h;
        let minus = f(&probe);
        probe[c] = x[c];
        if plus.len() != n_out || minus.len() != n_out {
            return Err(HyprError::dim(
                "function output length changed between probes",
            ));
        }
        for r in 0..n_out {
            let d = (plus[r] - minus[r]) / (h + h);
            if !d.is_finite() {
                return Err(HyprError::non_finite());
            }
            jac[r][c] = d;
        }
    }
    Ok(jac)
}
