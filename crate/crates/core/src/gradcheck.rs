//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with step `eps`. Returns
/// `max_i |g_analytic - g_fd| / max(1e-8, |g_fd|)`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::new(x.shape(), x.data().to_vec())?);
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check needs a scalar-valued function"));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![S::zero(); x.numel()]);
    let eval = |data: Vec<S>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(x.shape(), data)?);
        let o = f(&mut t, v)?;
        Ok(t.value(o).data()[0].as_f64())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] = plus[i] + S::of(eps);
        minus[i] = minus[i] - S::of(eps);
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i].as_f64() - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::new(&[3], vec![0.5, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let s = t.tanh(v)?;
                let p = t.mul(s, v)?;
                t.sum_all(p)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2]).unwrap();
        assert!(grad_check(|t, v| t.scale(v, 2.0), &x, 1e-6).is_err());
    }

    #[test]
    fn detached_path_is_flagged() {
        // The tape sees no gradient through detach while finite differences
        // do, so the check must report a large error.
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let d = t.detach(v);
                let p = t.mul(d, d)?;
                t.sum_all(p)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err > 0.5);
    }
}
