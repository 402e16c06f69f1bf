use crate::autograd::tape::{Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite difference with half-width `step`.
///
/// Per coordinate the error is `|a - fd| / max(|a|, |fd|, 1e-12)`. `f` must
/// build the same scalar function on every call.
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Precondition(format!(
            "gradcheck step {step} must be > 0"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.wrt(xv);

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(point)?;
        let out = f(&mut t, v)?;
        let value = t.value(out).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "gradcheck" });
        }
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(fd.abs()).max(1e-12);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = gradcheck(|t, x| t.mul(x, x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(gradcheck(|t, x| t.sum(x), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
