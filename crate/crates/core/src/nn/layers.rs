use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform, Ctx};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square-kernel 2-D convolution with zero padding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias, "same" padding for odd `k`.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let weight = store.add(&format!("{name}.weight"), uniform(&[c_out, c_in, k, k], (6.0 / fan_in).sqrt(), rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]).expect("c_out > 0"));
        Self { weight, bias, c_in, c_out, k, stride, pad: k / 2 }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    /// Convolves an input that carries only the first `channels` of the
    /// configured input channels, using the matching weight slice.
    pub fn forward_leading<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var, channels: usize) -> Result<Var> {
        if channels == self.c_in {
            return self.forward(cx, x);
        }
        let w = cx.param(self.weight);
        let w = cx.tape.narrow(w, 1, 0, channels)?;
        let b = cx.param(self.bias);
        cx.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Temporal-merge 3-D convolution: kernel `(stride_t, k, k)`, temporal
/// stride `stride_t`, spatial stride 1, "same" spatial padding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv3dTemporal {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub stride_t: usize,
    pub k: usize,
}

impl Conv3dTemporal {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride_t: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * stride_t * k * k) as f64;
        let weight =
            store.add(&format!("{name}.weight"), uniform(&[c_out, c_in, stride_t, k, k], (6.0 / fan_in).sqrt(), rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]).expect("c_out > 0"));
        Self { weight, bias, c_in, c_out, stride_t, k }
    }

    /// `x[B, C_in, T, H, W] → [B, C_out, T / stride_t, H, W]`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.tape.conv3d_temporal(x, w, Some(b), self.stride_t, self.k / 2)
    }
}

/// Fully connected layer on `[B, in]` rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), uniform(&[d_in, d_out], bound, rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]).expect("d_out > 0"));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        let y = cx.tape.matmul(x, w)?;
        cx.tape.add(y, b)
    }
}

/// Learnable lookup table `[V, E]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(&format!("{name}.table"), uniform(&[vocab, dim], 1.0, rng));
        Self { table, vocab, dim }
    }

    /// Row `index` as a `[E]` vector.
    pub fn lookup<S: Scalar>(&self, cx: &mut Ctx<S>, index: usize) -> Result<Var> {
        let t = cx.param(self.table);
        embedding_lookup(cx, t, index)
    }
}

/// Row `index` of `table[V, E]`; out-of-range indices are an
/// [`Error::Index`].
pub fn embedding_lookup<S: Scalar>(cx: &mut Ctx<S>, table: Var, index: usize) -> Result<Var> {
    let shape = cx.tape.shape(table).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!("embedding table must be 2-D, got {shape:?}")));
    }
    if index >= shape[0] {
        return Err(Error::Index(format!("embedding index {index} for table of {} rows", shape[0])));
    }
    cx.tape.select(table, 0, index)
}
