use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Bce,
}

pub fn loss<S: Scalar>(tape: &mut Tape<S>, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    match kind {
        LossKind::Mse => mse(tape, pred, target),
        LossKind::Bce => bce(tape, pred, target),
    }
}

fn same_shape<S: Scalar>(tape: &Tape<S>, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "loss operands differ: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean squared error.
pub fn mse<S: Scalar>(tape: &mut Tape<S>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target)?;
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Mean binary cross-entropy of probabilities against labels in `[0, 1]`.
pub fn bce<S: Scalar>(tape: &mut Tape<S>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target)?;
    let lo = S::of(BCE_CLAMP);
    let p = tape.clamp(pred, lo, S::one() - lo)?;
    let log_p = tape.log(p)?;
    let one_minus_p = tape.neg(p)?;
    let one_minus_p = tape.add_scalar(one_minus_p, S::one())?;
    let log_q = tape.log(one_minus_p)?;
    let one_minus_t = tape.neg(target)?;
    let one_minus_t = tape.add_scalar(one_minus_t, S::one())?;
    let a = tape.mul(target, log_p)?;
    let b = tape.mul(one_minus_t, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean_all(s)?;
    tape.neg(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pair(p: &[f64], t: &[f64]) -> (Tape<f64>, Var, Var) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[p.len()], p.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(&[t.len()], t.to_vec()).unwrap());
        (tape, a, b)
    }

    #[test]
    fn mse_example() {
        let (mut tape, p, t) = pair(&[1.0, 2.0, 4.0], &[1.0, 0.0, 1.0]);
        let l = loss(&mut tape, LossKind::Mse, p, t).unwrap();
        assert!((tape.value(l).data()[0] - 13.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bce_example_and_clamp() {
        let (mut tape, p, t) = pair(&[0.8, 0.25], &[1.0, 0.0]);
        let l = bce(&mut tape, p, t).unwrap();
        let want = -(0.8f64.ln() + 0.75f64.ln()) / 2.0;
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);

        let (mut tape, p, t) = pair(&[0.0], &[1.0]);
        let l = bce(&mut tape, p, t).unwrap();
        assert!((tape.value(l).data()[0] + BCE_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let (mut tape, p, t) = pair(&[1.0, 2.0], &[1.0]);
        assert!(matches!(mse(&mut tape, p, t), Err(Error::Shape(_))));
    }
}
