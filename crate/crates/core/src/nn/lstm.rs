use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform, Ctx};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-layer LSTM. Gate blocks in the packed weights are ordered
/// input, forget, candidate, output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Lstm {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let w_input = store.add(&format!("{name}.w_input"), uniform(&[input_dim, 4 * hidden_dim], bound, rng));
        let w_hidden = store.add(&format!("{name}.w_hidden"), uniform(&[hidden_dim, 4 * hidden_dim], bound, rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[4 * hidden_dim]).expect("hidden_dim > 0"));
        Self { w_input, w_hidden, bias, input_dim, hidden_dim }
    }

    /// Runs the recurrence from zero state over `steps`, each `[B, E]`, and
    /// returns the final hidden state `[B, H]`.
    pub fn forward_steps<S: Scalar>(&self, cx: &mut Ctx<S>, steps: &[Var]) -> Result<Var> {
        let first = steps.first().ok_or_else(|| Error::shape("LSTM needs at least one step"))?;
        let batch = cx.tape.shape(*first)[0];
        let hd = self.hidden_dim;
        let wx = cx.param(self.w_input);
        let wh = cx.param(self.w_hidden);
        let b = cx.param(self.bias);
        let zeros = Tensor::zeros(&[batch, hd])?;
        let mut h = cx.tape.constant(zeros.clone());
        let mut c = cx.tape.constant(zeros);
        for &x in steps {
            let s = cx.tape.shape(x);
            if s.len() != 2 || s[0] != batch || s[1] != self.input_dim {
                return Err(Error::shape(format!("LSTM step of shape {s:?}")));
            }
            let zx = cx.tape.matmul(x, wx)?;
            let zh = cx.tape.matmul(h, wh)?;
            let z = cx.tape.add(zx, zh)?;
            let z = cx.tape.add(z, b)?;
            let i = cx.tape.narrow(z, 1, 0, hd)?;
            let i = cx.tape.sigmoid(i)?;
            let f = cx.tape.narrow(z, 1, hd, hd)?;
            let f = cx.tape.sigmoid(f)?;
            let g = cx.tape.narrow(z, 1, 2 * hd, hd)?;
            let g = cx.tape.tanh(g)?;
            let o = cx.tape.narrow(z, 1, 3 * hd, hd)?;
            let o = cx.tape.sigmoid(o)?;
            let fc = cx.tape.mul(f, c)?;
            let ig = cx.tape.mul(i, g)?;
            c = cx.tape.add(fc, ig)?;
            let tc = cx.tape.tanh(c)?;
            h = cx.tape.mul(o, tc)?;
        }
        Ok(h)
    }

    /// `embeds[S, E] → h_S[H]`.
    pub fn forward_sequence<S: Scalar>(&self, cx: &mut Ctx<S>, embeds: Var) -> Result<Var> {
        let s = cx.tape.shape(embeds).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape(format!("LSTM sequence of shape {s:?}")));
        }
        let steps = (0..s[0]).map(|t| cx.tape.narrow(embeds, 0, t, 1)).collect::<Result<Vec<_>>>()?;
        let h = self.forward_steps(cx, &steps)?;
        cx.tape.reshape(h, &[self.hidden_dim])
    }
}
