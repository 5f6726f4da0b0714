//! Dense inner loops shared by matmul and the convolutions.
//!
//! All matrices are row-major slices. Every routine accumulates into `c`.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`, summing over `k` in ascending order.
pub(crate) fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == S::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + api * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] = acc[0] + x[0] * y[0];
        acc[1] = acc[1] + x[1] * y[1];
        acc[2] = acc[2] + x[2] * y[2];
        acc[3] = acc[3] + x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// Geometry of one 2-D convolution over a `[channels, h, w]` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `img[channels, h, w]` into `cols[channels·k·k, out_h·out_w]`.
/// Row order is (channel, ki, kj), matching a `[C_out, C_in, k, k]` weight.
pub(crate) fn im2col<S: Scalar>(img: &[S], g: &ConvGeom, cols: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { S::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into `img`, accumulating.
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, img: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one image: `out[c_out, p] = bias + W · cols`.
pub(crate) fn conv_forward_image<S: Scalar>(
    img: &[S],
    g: &ConvGeom,
    weight: &[S],
    bias: Option<&[S]>,
    c_out: usize,
    cols: &mut Vec<S>,
    out: &mut [S],
) {
    let p = g.out_h() * g.out_w();
    for o in 0..c_out {
        let b = bias.map_or(S::zero(), |b| b[o]);
        out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = b);
    }
    if g.is_pointwise() {
        gemm_nn(c_out, g.channels, p, weight, img, out);
    } else {
        cols.resize(g.patch_len() * p, S::zero());
        im2col(img, g, cols);
        gemm_nn(c_out, g.patch_len(), p, weight, cols, out);
    }
}

/// Backward convolution of one image. Accumulates into `d_img`, `d_weight`
/// and `d_bias` when present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_image<S: Scalar>(
    img: &[S],
    g: &ConvGeom,
    weight: &[S],
    c_out: usize,
    d_out: &[S],
    cols: &mut Vec<S>,
    d_cols: &mut Vec<S>,
    d_img: Option<&mut [S]>,
    d_weight: Option<&mut [S]>,
    d_bias: Option<&mut [S]>,
) {
    let p = g.out_h() * g.out_w();
    let k = g.patch_len();
    if let Some(db) = d_bias {
        for o in 0..c_out {
            db[o] = db[o] + d_out[o * p..(o + 1) * p].iter().copied().sum::<S>();
        }
    }
    let pointwise = g.is_pointwise();
    if let Some(dw) = d_weight {
        if pointwise {
            gemm_nt(c_out, p, k, d_out, img, dw);
        } else {
            cols.resize(k * p, S::zero());
            im2col(img, g, cols);
            gemm_nt(c_out, p, k, d_out, cols, dw);
        }
    }
    if let Some(di) = d_img {
        if pointwise {
            gemm_tn(k, c_out, p, weight, d_out, di);
        } else {
            d_cols.clear();
            d_cols.resize(k * p, S::zero());
            gemm_tn(k, c_out, p, weight, d_out, d_cols);
            col2im(d_cols, g, di);
        }
    }
}
