//! Forward definitions of every recorded operation.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_map, broadcast_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind<S> {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Neg,
    ClampMin(S),
    Clamp(S, S),
    Scale(S),
    AddScalar(S),
}

/// Element-wise operation selector, covering both arities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<S> {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Neg,
    ClampMin(S),
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn finite_or_err<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced a non-finite value")))
    }
}

impl<S: Scalar> Tape<S> {
    fn any_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Dispatches an element-wise operation; binary kinds require `b`.
    pub fn elementwise(&mut self, kind: Elementwise<S>, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::shape("binary operation needs two operands"));
        match kind {
            Elementwise::Add => self.binary(BinaryKind::Add, a, need_b()?),
            Elementwise::Sub => self.binary(BinaryKind::Sub, a, need_b()?),
            Elementwise::Mul => self.binary(BinaryKind::Mul, a, need_b()?),
            Elementwise::Div => self.binary(BinaryKind::Div, a, need_b()?),
            Elementwise::Relu => self.unary(UnaryKind::Relu, a),
            Elementwise::Sigmoid => self.unary(UnaryKind::Sigmoid, a),
            Elementwise::Tanh => self.unary(UnaryKind::Tanh, a),
            Elementwise::Exp => self.unary(UnaryKind::Exp, a),
            Elementwise::Log => self.unary(UnaryKind::Log, a),
            Elementwise::Neg => self.unary(UnaryKind::Neg, a),
            Elementwise::ClampMin(c) => self.unary(UnaryKind::ClampMin(c), a),
        }
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: S, y: S| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape())?;
            let ma = broadcast_map(ta.shape(), &shape);
            let mb = broadcast_map(tb.shape(), &shape);
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect();
            Tensor::new(&shape, data)?
        };
        if kind == BinaryKind::Div {
            finite_or_err(&value, "division")?;
        }
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Binary { kind, a: a.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind<S>, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let value = t.map(|v| match kind {
            UnaryKind::Relu => {
                if v > S::zero() {
                    v
                } else {
                    S::zero()
                }
            }
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Neg => -v,
            UnaryKind::ClampMin(c) => v.max(c),
            UnaryKind::Clamp(lo, hi) => v.max(lo).min(hi),
            UnaryKind::Scale(c) => v * c,
            UnaryKind::AddScalar(c) => v + c,
        });
        if matches!(kind, UnaryKind::Exp | UnaryKind::Log) {
            finite_or_err(&value, if kind == UnaryKind::Exp { "exp" } else { "log" })?;
        }
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(value, Op::Unary { kind, x: x.0 }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    /// Sums over `axes`. Summed axes are kept with size 1 when `keepdims`,
    /// otherwise removed (a full reduction yields shape `[1]`).
    pub fn reduce_sum(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || seen[ax] {
                return Err(Error::shape(format!("invalid reduction axes {axes:?} for {shape:?}")));
            }
            seen[ax] = true;
        }
        if axes.is_empty() {
            return self.reshape(x, &shape);
        }
        let kept: Vec<usize> =
            shape.iter().enumerate().map(|(i, &d)| if seen[i] { 1 } else { d }).collect();
        let map = broadcast_map(&kept, &shape);
        let mut out = vec![S::zero(); kept.iter().product()];
        for (&dst, &v) in map.iter().zip(self.nodes[x.0].value.data()) {
            out[dst] = out[dst] + v;
        }
        let rg = self.any_grad(&[x.0]);
        let summed = self.push(Tensor::new(&kept, out)?, Op::Sum { x: x.0 }, rg);
        if keepdims {
            return Ok(summed);
        }
        let mut squeezed: Vec<usize> =
            shape.iter().enumerate().filter(|(i, _)| !seen[*i]).map(|(_, &d)| d).collect();
        if squeezed.is_empty() {
            squeezed.push(1);
        }
        self.reshape(summed, &squeezed)
    }

    /// Sum of every element, as shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_sum(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, S::one() / S::of(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(value, Op::Reshape { x: x.0 }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(format!(
                "matmul of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    /// 2-D cross-correlation of `x[B, C_in, H, W]` with `w[C_out, C_in, k, k]`
    /// and optional `bias[C_out]`, zero padded.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects 4-D input and weight, got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let [b, c_in, h, wd] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [c_out, wc, kh, kw] = [tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]];
        if wc != c_in {
            return Err(Error::shape(format!("conv2d weight expects {wc} channels, input has {c_in}")));
        }
        if kh != kw || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{wd}"
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(Error::shape(format!("conv2d bias shape {:?}", self.shape(bv))));
            }
        }
        let g = ConvGeom { channels: c_in, h, w: wd, k: kh, stride, pad };
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![S::zero(); b * c_out * oh * ow];
        let mut cols = Vec::new();
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let tb = bias.map(|bv| self.nodes[bv.0].value.data());
        let (in_sz, out_sz) = (c_in * h * wd, c_out * oh * ow);
        for i in 0..b {
            kernels::conv_forward_image(
                &tx.data()[i * in_sz..(i + 1) * in_sz],
                &g,
                tw.data(),
                tb,
                c_out,
                &mut cols,
                &mut out[i * out_sz..(i + 1) * out_sz],
            );
        }
        let mut parents = vec![x.0, w.0];
        parents.extend(bias.map(|v| v.0));
        let rg = self.any_grad(&parents);
        let value = Tensor::new(&[b, c_out, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, b: bias.map(|v| v.0), stride, pad }, rg))
    }

    /// 3-D convolution of `x[B, C_in, T, H, W]` with
    /// `w[C_out, C_in, k_t, k, k]`: temporal stride `stride_t` with
    /// `k_t == stride_t` (non-overlapping windows), spatial stride 1 and
    /// `pad` zero padding. Output is `[B, C_out, T / stride_t, H', W']`.
    pub fn conv3d_temporal(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride_t: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.rank() != 5 || tw.rank() != 5 {
            return Err(Error::shape(format!(
                "conv3d expects 5-D input and weight, got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let s = tx.shape();
        let (b, c_in, t, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
        let ws = tw.shape();
        let (c_out, kt, k) = (ws[0], ws[2], ws[3]);
        if ws[1] != c_in || ws[3] != ws[4] {
            return Err(Error::shape(format!("conv3d weight {ws:?} for input {s:?}")));
        }
        if stride_t == 0 || kt != stride_t || t % stride_t != 0 {
            return Err(Error::shape(format!(
                "conv3d needs kernel_t == stride_t dividing T (T={t}, k_t={kt}, stride={stride_t})"
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!("conv3d kernel {k} too large for {h}x{wd}")));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(Error::shape(format!("conv3d bias shape {:?}", self.shape(bv))));
            }
        }
        let frames = t / stride_t;
        let g = ConvGeom { channels: c_in * kt, h, w: wd, k, stride: 1, pad };
        let (oh, ow) = (g.out_h(), g.out_w());
        let p = oh * ow;
        let mut out = vec![S::zero(); b * c_out * frames * p];
        let mut cols = Vec::new();
        let mut window = vec![S::zero(); c_in * kt * h * wd];
        let mut frame_out = vec![S::zero(); c_out * p];
        let tb = bias.map(|bv| self.nodes[bv.0].value.data());
        for bi in 0..b {
            for l in 0..frames {
                gather_window(tx.data(), bi, c_in, t, h * wd, l * kt, kt, &mut window);
                kernels::conv_forward_image(&window, &g, tw.data(), tb, c_out, &mut cols, &mut frame_out);
                for o in 0..c_out {
                    let dst = ((bi * c_out + o) * frames + l) * p;
                    out[dst..dst + p].copy_from_slice(&frame_out[o * p..(o + 1) * p]);
                }
            }
        }
        let mut parents = vec![x.0, w.0];
        parents.extend(bias.map(|v| v.0));
        let rg = self.any_grad(&parents);
        let value = Tensor::new(&[b, c_out, frames, oh, ow], out)?;
        Ok(self.push(value, Op::Conv3d { x: x.0, w: w.0, b: bias.map(|v| v.0), stride_t, pad }, rg))
    }

    /// Per-channel batch normalization of `x[B, C, H, W]`.
    ///
    /// In training mode the batch statistics are used and returned as
    /// `(mean, biased variance)` so the caller can update running stats.
    /// Otherwise `running` supplies them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
        running: Option<(&[S], &[S])>,
    ) -> Result<(Var, Vec<S>, Vec<S>)> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 4 {
            return Err(Error::shape(format!("batch norm expects 4-D input, got {:?}", tx.shape())));
        }
        let (b, c, hw) = (tx.shape()[0], tx.shape()[1], tx.shape()[2] * tx.shape()[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("batch norm parameters do not match {c} channels")));
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("running statistics do not match channel count"));
            }
        }
        let n = S::of((b * hw) as f64);
        let data = tx.data();
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        match running {
            None => {
                for ch in 0..c {
                    let mut s = S::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        s = s + data[base..base + hw].iter().copied().sum::<S>();
                    }
                    mean[ch] = s / n;
                    let mut q = S::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        q = q + data[base..base + hw].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<S>();
                    }
                    var[ch] = q / n;
                }
            }
            Some((m, v)) => {
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut xhat = vec![S::zero(); data.len()];
        let mut out = vec![S::zero(); data.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let rg = self.any_grad(&[x.0, gamma.0, beta.0]);
        let training = running.is_none();
        let v = self.push(
            value,
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, training },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Rearranges `[B, r²·C, H, W]` into `[B, C, r·H, r·W]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 4 || r == 0 || !t.shape()[1].is_multiple_of(r * r) {
            return Err(Error::shape(format!("pixel shuffle by {r} of {:?}", t.shape())));
        }
        let s = t.shape();
        let (b, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
        let mut out = vec![S::zero(); t.numel()];
        shuffle_copy(t.data(), &mut out, b, c, h, w, r, false);
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(Tensor::new(&[b, c, h * r, w * r], out)?, Op::PixelShuffle { x: x.0, r }, rg))
    }

    /// Inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 4 || r == 0 || !t.shape()[2].is_multiple_of(r) || !t.shape()[3].is_multiple_of(r) {
            return Err(Error::shape(format!("pixel unshuffle by {r} of {:?}", t.shape())));
        }
        let s = t.shape();
        let (b, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
        let mut out = vec![S::zero(); t.numel()];
        shuffle_copy(t.data(), &mut out, b, c, h, w, r, true);
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(Tensor::new(&[b, c * r * r, h, w], out)?, Op::PixelUnshuffle { x: x.0, r }, rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!("cannot concat {s:?} with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: ids, axis }, rg))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(format!("narrow({axis}, {start}, {len}) of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { x: x.0, axis, start }, rg))
    }

    /// Picks entry `index` of `axis`, removing that axis. Rank-1 inputs
    /// yield shape `[1]`.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("select axis {axis} for {s:?}")));
        }
        if index >= s[axis] {
            return Err(Error::Index(format!("index {index} out of range for axis of size {}", s[axis])));
        }
        let v = self.narrow(x, axis, index, 1)?;
        let mut shape: Vec<usize> =
            s.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, &d)| d).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(v, &shape)
    }

    /// Non-overlapping `n×n` sum pooling over the last two axes.
    pub fn sum_pool(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.shape().to_vec();
        let r = s.len();
        if r < 2 || n == 0 || !s[r - 2].is_multiple_of(n) || !s[r - 1].is_multiple_of(n) {
            return Err(Error::shape(format!("sum pool by {n} of {s:?}")));
        }
        let (h, w) = (s[r - 2] / n, s[r - 1] / n);
        let planes: usize = s[..r - 2].iter().product();
        let mut out = vec![S::zero(); planes * h * w];
        for p in 0..planes {
            let src = &t.data()[p * h * w * n * n..(p + 1) * h * w * n * n];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..h * n {
                for xx in 0..w * n {
                    let d = &mut dst[(y / n) * w + xx / n];
                    *d = *d + src[y * w * n + xx];
                }
            }
        }
        let mut shape = s;
        shape[r - 2] = h;
        shape[r - 1] = w;
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumPool { x: x.0, n }, rg))
    }

    /// Nearest-neighbour upsampling by `n` over the last two axes.
    pub fn upsample_nearest(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.shape().to_vec();
        let r = s.len();
        if r < 2 || n == 0 {
            return Err(Error::shape(format!("upsample by {n} of {s:?}")));
        }
        let (h, w) = (s[r - 2], s[r - 1]);
        let planes: usize = s[..r - 2].iter().product();
        let mut out = vec![S::zero(); planes * h * w * n * n];
        for p in 0..planes {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w * n * n..(p + 1) * h * w * n * n];
            for y in 0..h * n {
                for xx in 0..w * n {
                    dst[y * w * n + xx] = src[(y / n) * w + xx / n];
                }
            }
        }
        let mut shape = s;
        shape[r - 2] = h * n;
        shape[r - 1] = w * n;
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Upsample { x: x.0, n }, rg))
    }

    /// Keeps every `stride`-th pixel of the last two axes, starting at 0.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride == 1 {
            return Ok(x);
        }
        let t = &self.nodes[x.0].value;
        let s = t.shape().to_vec();
        let r = s.len();
        if r < 2 || stride == 0 {
            return Err(Error::shape(format!("subsample by {stride} of {s:?}")));
        }
        let (h, w) = (s[r - 2], s[r - 1]);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let planes: usize = s[..r - 2].iter().product();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(t.data()[p * h * w + y * stride * w + xx * stride]);
                }
            }
        }
        let mut shape = s;
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Subsample { x: x.0, stride }, rg))
    }
}

/// Copies frames `[t0, t0 + kt)` of every input channel of batch item `bi`
/// into `window[c_in · kt, h·w]`, ordered (channel, frame).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gather_window<S: Scalar>(
    data: &[S],
    bi: usize,
    c_in: usize,
    t: usize,
    hw: usize,
    t0: usize,
    kt: usize,
    window: &mut [S],
) {
    for c in 0..c_in {
        for dt in 0..kt {
            let src = ((bi * c_in + c) * t + t0 + dt) * hw;
            let dst = (c * kt + dt) * hw;
            window[dst..dst + hw].copy_from_slice(&data[src..src + hw]);
        }
    }
}

/// Shuffle (`inverse == false`): `src[B, C·r², H, W] → dst[B, C, rH, rW]`.
/// Unshuffle swaps the roles.
#[allow(clippy::too_many_arguments)]
pub(crate) fn shuffle_copy<S: Scalar>(
    src: &[S],
    dst: &mut [S],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    inverse: bool,
) {
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let sub = ci * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let packed = ((bi * c * r * r + sub) * h + y) * w + x;
                            let spread = ((bi * c + ci) * h * r + r * y + i) * w * r + r * x + j;
                            if inverse {
                                dst[packed] = src[spread];
                            } else {
                                dst[spread] = src[packed];
                            }
                        }
                    }
                }
            }
        }
    }
}
