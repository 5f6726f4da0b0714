//! Neural building blocks on top of the tape.

mod blocks;
mod layers;
mod loss;
mod lstm;
mod norm;

pub use blocks::{DenseBlock, FeatureUnit, ResBlock, UpsampleUnit};
pub use layers::{Conv2d, Conv3dTemporal, Embedding, Linear};
pub use loss::{bce, loss, mse, LossKind, BCE_CLAMP};
pub use lstm::Lstm;
pub use norm::{n2_normalize, n2_project, BatchNorm2d, N2_EPS};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A tape paired with the store whose parameters a forward pass reads.
pub struct Ctx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub store: &'a mut ParamStore<S>,
    pub training: bool,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(tape: &'a mut Tape<S>, store: &'a mut ParamStore<S>, training: bool) -> Self {
        Self { tape, store, training }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Backward from `loss` into this context's store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward_into(loss, self.store)?;
        Ok(())
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub(crate) fn uniform<S: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<S> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| S::of(dist.sample(rng))).expect("non-empty shape")
}
