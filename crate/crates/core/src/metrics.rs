//! Evaluation metrics and the bicubic baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Metrics over all cells of all slots. `mape` is `None` when the truth has
/// no positive cell; `corr` is 0 when either side is constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub nrmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub corr: f64,
    pub n_cells: usize,
    pub n_slots: usize,
}

/// `pred` and `truth` are `[S, nH, nW]` (or any equal shapes; the leading
/// axis counts as slots).
pub fn evaluate<S: Scalar>(pred: &Tensor<S>, truth: &Tensor<S>) -> Result<MetricReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    let p: Vec<f64> = pred.data().iter().map(|v| v.as_f64()).collect();
    let t: Vec<f64> = truth.data().iter().map(|v| v.as_f64()).collect();
    let n = p.len() as f64;
    let (mut se, mut ae, mut ape, mut n_pos) = (0.0, 0.0, 0.0, 0usize);
    for (&a, &b) in p.iter().zip(&t) {
        let d = a - b;
        se += d * d;
        ae += d.abs();
        if b > 0.0 {
            ape += d.abs() / b;
            n_pos += 1;
        }
    }
    let rmse = (se / n).sqrt();
    let mean_t = t.iter().sum::<f64>() / n;
    let n_slots = if pred.rank() >= 3 { pred.shape()[0] } else { 1 };
    Ok(MetricReport {
        rmse,
        nrmse: if mean_t > 0.0 { rmse / mean_t } else { f64::NAN },
        mae: ae / n,
        mape: (n_pos > 0).then(|| ape / n_pos as f64),
        corr: pearson(&p, &t),
        n_cells: p.len() / n_slots,
        n_slots,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Catmull-Rom weights for taps at offsets -1, 0, 1, 2 from the sample
/// left of the query point, `phase ∈ [0, 1)`.
pub fn cubic_weights(phase: f64) -> [f64; 4] {
    let t = phase;
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn linear_weights(phase: f64) -> [f64; 4] {
    [0.0, 1.0 - phase, phase, 0.0]
}

/// Interpolates per-cell density `coarse / n²` onto the fine grid with
/// clamped borders, then clamps at zero. `coarse` is `[.., H, W]`; grids
/// smaller than 4×4 fall back to bilinear weights.
pub fn bicubic_upsample<S: Scalar>(coarse: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    let s = coarse.shape();
    let r = s.len();
    if r < 2 || n == 0 {
        return Err(Error::shape(format!("cannot upsample {s:?} by {n}")));
    }
    let (h, w) = (s[r - 2], s[r - 1]);
    let cubic = h >= 4 && w >= 4;
    if !cubic {
        log::warn!("{h}x{w} grid is too small for bicubic support; using bilinear");
    }
    let weights = |phase: f64| if cubic { cubic_weights(phase) } else { linear_weights(phase) };
    let taps = |i: usize| -> (isize, [f64; 4]) {
        let u = (i as f64 + 0.5) / n as f64 - 0.5;
        let base = u.floor();
        (base as isize, weights(u - base))
    };
    let clampi = |i: isize, len: usize| i.clamp(0, len as isize - 1) as usize;
    let inv = 1.0 / (n * n) as f64;
    let planes: usize = s[..r - 2].iter().product();
    let (fh, fw) = (h * n, w * n);
    let mut out = Vec::with_capacity(planes * fh * fw);
    for p in 0..planes {
        let src = &coarse.data()[p * h * w..(p + 1) * h * w];
        for y in 0..fh {
            let (by, wy) = taps(y);
            for x in 0..fw {
                let (bx, wx) = taps(x);
                let mut acc = 0.0;
                for (a, &wa) in wy.iter().enumerate() {
                    let yy = clampi(by + a as isize - 1, h);
                    let mut row = 0.0;
                    for (b, &wb) in wx.iter().enumerate() {
                        let xx = clampi(bx + b as isize - 1, w);
                        row += wb * src[yy * w + xx].as_f64();
                    }
                    acc += wa * row;
                }
                out.push(S::of((acc * inv).max(0.0)));
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 2] = fh;
    shape[r - 1] = fw;
    Tensor::new(&shape, out)
}
