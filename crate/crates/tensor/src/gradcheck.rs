use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by [`finite_diff_check`] in 64-bit mode.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences.
///
/// Returns `max_i |g_i - d_i| / (|d_i| + 1e-8)` where `g` is the autodiff
/// gradient at `x` and `d_i = (f(x + eps e_i) - f(x - eps e_i)) / 2eps`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Var<T>) -> Result<Var<T>>,
{
    if eps <= T::zero() {
        return Err(TensorError::invalid("finite_diff_check", "eps must be positive"));
    }
    let eval = |point: Tensor<T>| -> Result<T> {
        let tape = Tape::new();
        let y = f(&tape.constant(point))?.value().item()?;
        if y.is_finite() {
            Ok(y)
        } else {
            Err(TensorError::NonFinite { op: "finite_diff_check" })
        }
    };

    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&xv)?;
    if !y.value().item()?.is_finite() {
        return Err(TensorError::NonFinite { op: "finite_diff_check" });
    }
    let grad = y.backward()?.get(&xv);

    let two_eps = eps + eps;
    let floor = T::lit(1e-8);
    let mut worst = T::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let central = (eval(plus)? - eval(minus)?) / two_eps;
        let err = (grad.data()[i] - central).abs() / (central.abs() + floor);
        worst = worst.max(err);
    }
    Ok(worst)
}
