//! Vector-Jacobian products for every [`Op`].

use super::ops::{gather_window, shuffle_copy, BinaryKind, UnaryKind};
use super::{Gradients, Node, Op, Tape};
use crate::error::Result;
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::broadcast_map;

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, g: Vec<S>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

/// Sums a gradient laid out over `out_shape` down to a broadcast source.
fn reduce_to<S: Scalar>(g: &[S], src_shape: &[usize], out_shape: &[usize]) -> Vec<S> {
    if src_shape == out_shape {
        return g.to_vec();
    }
    let map = broadcast_map(src_shape, out_shape);
    let mut r = vec![S::zero(); src_shape.iter().product()];
    for (&i, &v) in map.iter().zip(g) {
        r[i] = r[i] + v;
    }
    r
}

pub(super) fn run<S: Scalar>(tape: &Tape<S>, loss: usize) -> Result<Gradients<S>> {
    let nodes = &tape.nodes;
    let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
    if nodes[loss].requires_grad {
        grads[loss] = Some(vec![S::one()]);
    }
    for i in (0..=loss).rev() {
        let node = &nodes[i];
        if !node.requires_grad || matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        for (parent, pg) in vjp(nodes, node, &g) {
            if nodes[parent].requires_grad {
                accumulate(&mut grads[parent], pg);
            }
        }
        // interior gradients are not kept
    }
    // leaves that require grad but were unreachable get zeros
    for (i, node) in nodes.iter().enumerate().take(loss + 1) {
        if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
            grads[i] = Some(vec![S::zero(); node.value.numel()]);
        }
    }
    for (i, node) in nodes.iter().enumerate() {
        if !matches!(node.op, Op::Leaf) || i > loss {
            grads[i] = None;
        }
    }
    Ok(Gradients { grads })
}

fn vjp<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S]) -> Vec<(usize, Vec<S>)> {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => vec![],
        Op::Binary { kind, a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let same = ta.shape() == tb.shape() && ta.shape() == out_shape;
            let (ma, mb) = if same {
                (None, None)
            } else {
                (Some(broadcast_map(ta.shape(), out_shape)), Some(broadcast_map(tb.shape(), out_shape)))
            };
            let av = |k: usize| ta.data()[ma.as_ref().map_or(k, |m| m[k])];
            let bv = |k: usize| tb.data()[mb.as_ref().map_or(k, |m| m[k])];
            let mut res = Vec::new();
            if wants(*a) {
                let ga: Vec<S> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul => g.iter().enumerate().map(|(k, &gk)| gk * bv(k)).collect(),
                    BinaryKind::Div => g.iter().enumerate().map(|(k, &gk)| gk / bv(k)).collect(),
                };
                res.push((*a, reduce_to(&ga, ta.shape(), out_shape)));
            }
            if wants(*b) {
                let gb: Vec<S> = match kind {
                    BinaryKind::Add => g.to_vec(),
                    BinaryKind::Sub => g.iter().map(|&gk| -gk).collect(),
                    BinaryKind::Mul => g.iter().enumerate().map(|(k, &gk)| gk * av(k)).collect(),
                    BinaryKind::Div => g
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| {
                            let y = bv(k);
                            -gk * av(k) / (y * y)
                        })
                        .collect(),
                };
                res.push((*b, reduce_to(&gb, tb.shape(), out_shape)));
            }
            res
        }
        Op::Unary { kind, x } => {
            let xs = val(*x).data();
            let ys = node.value.data();
            let gx: Vec<S> = g
                .iter()
                .enumerate()
                .map(|(k, &gk)| {
                    let (xv, yv) = (xs[k], ys[k]);
                    match *kind {
                        UnaryKind::Relu => {
                            if xv > S::zero() {
                                gk
                            } else {
                                S::zero()
                            }
                        }
                        UnaryKind::Sigmoid => gk * yv * (S::one() - yv),
                        UnaryKind::Tanh => gk * (S::one() - yv * yv),
                        UnaryKind::Exp => gk * yv,
                        UnaryKind::Log => gk / xv,
                        UnaryKind::Neg => -gk,
                        UnaryKind::ClampMin(c) => {
                            if xv > c {
                                gk
                            } else {
                                S::zero()
                            }
                        }
                        UnaryKind::Clamp(lo, hi) => {
                            if xv >= lo && xv <= hi {
                                gk
                            } else {
                                S::zero()
                            }
                        }
                        UnaryKind::Scale(c) => gk * c,
                        UnaryKind::AddScalar(_) => gk,
                    }
                })
                .collect();
            vec![(*x, gx)]
        }
        Op::Sum { x } => {
            let map = broadcast_map(out_shape, val(*x).shape());
            vec![(*x, map.iter().map(|&i| g[i]).collect())]
        }
        Op::Reshape { x } => vec![(*x, g.to_vec())],
        Op::Matmul { a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut res = Vec::new();
            if wants(*a) {
                let mut ga = vec![S::zero(); m * k];
                kernels::gemm_nt(m, n, k, g, tb.data(), &mut ga);
                res.push((*a, ga));
            }
            if wants(*b) {
                let mut gb = vec![S::zero(); k * n];
                kernels::gemm_tn(k, m, n, ta.data(), g, &mut gb);
                res.push((*b, gb));
            }
            res
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (tx, tw) = (val(*x), val(*w));
            let s = tx.shape();
            let c_out = tw.shape()[0];
            let geom = ConvGeom { channels: s[1], h: s[2], w: s[3], k: tw.shape()[2], stride: *stride, pad: *pad };
            let in_sz = s[1] * s[2] * s[3];
            let out_sz = c_out * geom.out_h() * geom.out_w();
            let mut gx = wants(*x).then(|| vec![S::zero(); tx.numel()]);
            let mut gw = wants(*w).then(|| vec![S::zero(); tw.numel()]);
            let mut gb = b.filter(|&bi| wants(bi)).map(|_| vec![S::zero(); c_out]);
            let (mut cols, mut d_cols) = (Vec::new(), Vec::new());
            for bi in 0..s[0] {
                kernels::conv_backward_image(
                    &tx.data()[bi * in_sz..(bi + 1) * in_sz],
                    &geom,
                    tw.data(),
                    c_out,
                    &g[bi * out_sz..(bi + 1) * out_sz],
                    &mut cols,
                    &mut d_cols,
                    gx.as_mut().map(|v| &mut v[bi * in_sz..(bi + 1) * in_sz]),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
            }
            let mut res = Vec::new();
            if let Some(v) = gx {
                res.push((*x, v));
            }
            if let Some(v) = gw {
                res.push((*w, v));
            }
            if let (Some(bi), Some(v)) = (b, gb) {
                res.push((*bi, v));
            }
            res
        }
        Op::Conv3d { x, w, b, stride_t, pad } => {
            let (tx, tw) = (val(*x), val(*w));
            let s = tx.shape();
            let (bn, c_in, t, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
            let (c_out, kt, k) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
            let frames = t / stride_t;
            let geom = ConvGeom { channels: c_in * kt, h, w: wd, k, stride: 1, pad: *pad };
            let p = geom.out_h() * geom.out_w();
            let hw = h * wd;
            let mut gx = wants(*x).then(|| vec![S::zero(); tx.numel()]);
            let mut gw = wants(*w).then(|| vec![S::zero(); tw.numel()]);
            let mut gb = b.filter(|&bi| wants(bi)).map(|_| vec![S::zero(); c_out]);
            let (mut cols, mut d_cols) = (Vec::new(), Vec::new());
            let mut window = vec![S::zero(); c_in * kt * hw];
            let mut g_frame = vec![S::zero(); c_out * p];
            let mut g_window = vec![S::zero(); c_in * kt * hw];
            for bi in 0..bn {
                for l in 0..frames {
                    gather_window(tx.data(), bi, c_in, t, hw, l * kt, kt, &mut window);
                    for o in 0..c_out {
                        let src = ((bi * c_out + o) * frames + l) * p;
                        g_frame[o * p..(o + 1) * p].copy_from_slice(&g[src..src + p]);
                    }
                    g_window.iter_mut().for_each(|v| *v = S::zero());
                    kernels::conv_backward_image(
                        &window,
                        &geom,
                        tw.data(),
                        c_out,
                        &g_frame,
                        &mut cols,
                        &mut d_cols,
                        gx.is_some().then_some(&mut g_window[..]),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    if let Some(gxv) = gx.as_mut() {
                        for c in 0..c_in {
                            for dt in 0..kt {
                                let dst = ((bi * c_in + c) * t + l * kt + dt) * hw;
                                let src = (c * kt + dt) * hw;
                                for q in 0..hw {
                                    gxv[dst + q] = gxv[dst + q] + g_window[src + q];
                                }
                            }
                        }
                    }
                }
            }
            let mut res = Vec::new();
            if let Some(v) = gx {
                res.push((*x, v));
            }
            if let Some(v) = gw {
                res.push((*w, v));
            }
            if let (Some(bi), Some(v)) = (b, gb) {
                res.push((*bi, v));
            }
            res
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
            let s = val(*x).shape();
            let (bn, c, hw) = (s[0], s[1], s[2] * s[3]);
            let gd = val(*gamma).data();
            let mut sum_g = vec![S::zero(); c];
            let mut sum_gx = vec![S::zero(); c];
            for bi in 0..bn {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    for q in base..base + hw {
                        sum_g[ch] = sum_g[ch] + g[q];
                        sum_gx[ch] = sum_gx[ch] + g[q] * xhat[q];
                    }
                }
            }
            let mut res = Vec::new();
            if wants(*x) {
                let n = S::of((bn * hw) as f64);
                let mut gx = vec![S::zero(); g.len()];
                for bi in 0..bn {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let scale = gd[ch] * inv_std[ch];
                        for q in base..base + hw {
                            gx[q] = if *training {
                                scale / n * (n * g[q] - sum_g[ch] - xhat[q] * sum_gx[ch])
                            } else {
                                scale * g[q]
                            };
                        }
                    }
                }
                res.push((*x, gx));
            }
            if wants(*gamma) {
                res.push((*gamma, sum_gx));
            }
            if wants(*beta) {
                res.push((*beta, sum_g));
            }
            res
        }
        Op::PixelShuffle { x, r } => {
            let s = out_shape;
            let (b, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
            let mut gx = vec![S::zero(); g.len()];
            shuffle_copy(g, &mut gx, b, c, h, w, *r, true);
            vec![(*x, gx)]
        }
        Op::PixelUnshuffle { x, r } => {
            let s = val(*x).shape();
            let (b, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
            let mut gx = vec![S::zero(); g.len()];
            shuffle_copy(g, &mut gx, b, c, h, w, *r, false);
            vec![(*x, gx)]
        }
        Op::Concat { parts, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut res = Vec::new();
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if wants(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    res.push((p, gp));
                }
                start += len;
            }
            res
        }
        Op::Narrow { x, axis, start } => {
            let s = val(*x).shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = out_shape[*axis];
            let mut gx = vec![S::zero(); val(*x).numel()];
            for o in 0..outer {
                let dst = (o * s[*axis] + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(*x, gx)]
        }
        Op::SumPool { x, n } => {
            let r = out_shape.len();
            let (h, w) = (out_shape[r - 2], out_shape[r - 1]);
            let planes: usize = out_shape[..r - 2].iter().product();
            let mut gx = vec![S::zero(); val(*x).numel()];
            for p in 0..planes {
                for y in 0..h * n {
                    for xx in 0..w * n {
                        gx[p * h * w * n * n + y * w * n + xx] = g[p * h * w + (y / n) * w + xx / n];
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Upsample { x, n } => {
            let s = val(*x).shape();
            let r = s.len();
            let (h, w) = (s[r - 2], s[r - 1]);
            let planes: usize = s[..r - 2].iter().product();
            let mut gx = vec![S::zero(); val(*x).numel()];
            for p in 0..planes {
                for y in 0..h * n {
                    for xx in 0..w * n {
                        let d = &mut gx[p * h * w + (y / n) * w + xx / n];
                        *d = *d + g[p * h * w * n * n + y * w * n + xx];
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Subsample { x, stride } => {
            let s = val(*x).shape();
            let r = s.len();
            let (h, w) = (s[r - 2], s[r - 1]);
            let (oh, ow) = (out_shape[r - 2], out_shape[r - 1]);
            let planes: usize = s[..r - 2].iter().product();
            let mut gx = vec![S::zero(); val(*x).numel()];
            for p in 0..planes {
                for y in 0..oh {
                    for xx in 0..ow {
                        gx[p * h * w + y * stride * w + xx * stride] = g[p * oh * ow + y * ow + xx];
                    }
                }
            }
            vec![(*x, gx)]
        }
    }
}
