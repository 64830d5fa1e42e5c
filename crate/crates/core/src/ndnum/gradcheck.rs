use crate::error::{PdmError, Result};

use super::{Tape, Tensor, Var};

/// Largest relative disagreement between the tape gradient of `f` at `x` and a
/// central finite difference with step `eps`.
///
/// Per coordinate the error is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = f(&mut tape, xv)?;
        tape.backward(loss)?.wrt(xv)
    };
    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(probe);
        let out = f(&mut tape, xv)?;
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Err(PdmError::numeric(
                "grad_check",
                format!("non-finite gradient at coordinate {i}"),
            ));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
