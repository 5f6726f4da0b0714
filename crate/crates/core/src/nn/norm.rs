use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor added to the rectified weights so empty blocks never divide 0/0.
pub const N2_EPS: f64 = 1e-9;

/// Batch normalization over `[B, C, H, W]` with running statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        let ones = Tensor::full(&[channels], S::one()).expect("channels > 0");
        let zeros = Tensor::zeros(&[channels]).expect("channels > 0");
        Self {
            gamma: store.add(&format!("{name}.gamma"), ones.clone()),
            beta: store.add(&format!("{name}.beta"), zeros.clone()),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), zeros),
            running_var: store.add_buffer(&format!("{name}.running_var"), ones),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running estimates (unbiased variance); eval mode uses the running
    /// estimates.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let eps = S::of(self.eps);
        if !cx.training {
            let rm = cx.store.get(self.running_mean).data().to_vec();
            let rv = cx.store.get(self.running_var).data().to_vec();
            let (y, _, _) = cx.tape.batch_norm(x, gamma, beta, eps, Some((&rm, &rv)))?;
            return Ok(y);
        }
        let (y, mean, var) = cx.tape.batch_norm(x, gamma, beta, eps, None)?;
        let s = cx.tape.shape(x);
        let count = (s[0] * s[2] * s[3]) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = S::of(self.momentum);
        let keep = S::one() - m;
        let rm = cx.store.get_mut(self.running_mean).data_mut();
        for (r, &b) in rm.iter_mut().zip(&mean) {
            *r = keep * *r + m * b;
        }
        let rv = cx.store.get_mut(self.running_var).data_mut();
        for (r, &b) in rv.iter_mut().zip(&var) {
            *r = keep * *r + m * b * S::of(unbias);
        }
        Ok(y)
    }
}

/// Projects raw fine-grid scores onto the set of non-negative maps whose
/// `n×n` blocks sum to the coarse values.
///
/// `raw[B, 1, nH, nW]`, `coarse[B, 1, H, W]`. The weights are
/// `relu(raw) + ε`, normalized within each block, then scaled by the block's
/// coarse value.
pub fn n2_normalize<S: Scalar>(tape: &mut Tape<S>, raw: Var, coarse: Var, n: usize) -> Result<Var> {
    let rs = tape.shape(raw).to_vec();
    let cs = tape.shape(coarse).to_vec();
    if rs.len() != 4
        || cs.len() != 4
        || rs[0] != cs[0]
        || rs[1] != cs[1]
        || n == 0
        || rs[2] != n * cs[2]
        || rs[3] != n * cs[3]
    {
        return Err(Error::shape(format!("N² normalization of {rs:?} against {cs:?} with n={n}")));
    }
    let w = tape.relu(raw)?;
    let w = tape.add_scalar(w, S::of(N2_EPS))?;
    let block = tape.sum_pool(w, n)?;
    let denom = tape.upsample_nearest(block, n)?;
    let share = tape.div(w, denom)?;
    let mass = tape.upsample_nearest(coarse, n)?;
    tape.mul(share, mass)
}

/// Value-only [`n2_normalize`] for tensors outside any training graph.
pub fn n2_project<S: Scalar>(raw: &Tensor<S>, coarse: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let r = tape.constant(raw.clone());
    let c = tape.constant(coarse.clone());
    let out = n2_normalize(&mut tape, r, c, n)?;
    Ok(tape.value(out).clone())
}
