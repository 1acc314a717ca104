use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(x, point.shape());

    let eval = |p: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(point.shape().to_vec(), p)?);
        let out = f(&mut tape, x)?;
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += step;
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
