use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Largest `|analytic - central difference| / max(1, |analytic|)` over all
/// coordinates of `point` for the scalar function `f`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: T) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    if step <= T::zero() {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let eval = |probe: Tensor<T>| -> Result<T> {
        let tape = Tape::new();
        let x = tape.leaf(probe);
        let v = f(&tape, x)?.value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };
    let two = T::lit(2.0);
    let mut worst = T::zero();
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / T::one().max(a.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
