use super::{AutogradError, Tape, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, AutogradError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutogradError>,
{
    if let Some(coordinate) = point.first_non_finite() {
        return Err(AutogradError::NonFinite { coordinate });
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64, AutogradError> {
        let mut t = Tape::new();
        let x = t.param(p);
        let y = f(&mut t, x)?;
        Ok(t.scalar_value(y))
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(AutogradError::NonFinite { coordinate: i });
        }
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
