//! Kernels against direct nested-loop reference implementations on random
//! small instances.

use crate::common::*;
use popmap_core::autodiff::Tape;
use popmap_core::grid::coarsen;
use popmap_core::metrics::evaluate;
use popmap_core::Tensor;
use rand::Rng;

const INSTANCES: usize = 60;
const TOL: f64 = 1e-10;

fn close(name: &str, got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len(), "{name}: length");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let err = (g - w).abs() / w.abs().max(1.0);
        assert!(err <= TOL, "{name}[{i}]: {g} vs {w}");
    }
}

fn at(t: &Tensor<f64>, idx: &[usize]) -> f64 {
    t.get(idx).unwrap()
}

pub fn conv2d_matches_loops() {
    let mut r = rng(100);
    for case in 0..INSTANCES {
        let (b, ci, co) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let k = [1, 3, 5][r.random_range(0..3)];
        let (h, w) = (r.random_range(k.max(2)..9), r.random_range(k.max(2)..9));
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=k / 2);
        let x = uniform(&[b, ci, h, w], -1.0, 1.0, &mut r);
        let wt = uniform(&[co, ci, k, k], -1.0, 1.0, &mut r);
        let bias = uniform(&[co], -1.0, 1.0, &mut r);

        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let got = tape.value(y);

        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        assert_eq!(got.shape(), &[b, co, oh, ow], "case {case}");
        let mut want = Vec::new();
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = at(&bias, &[o]);
                        for c in 0..ci {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += at(&x, &[bi, c, iy as usize, ix as usize]) * at(&wt, &[o, c, i, j]);
                                }
                            }
                        }
                        want.push(acc);
                    }
                }
            }
        }
        close(&format!("conv2d case {case}"), got.data(), &want);
    }
}

pub fn conv3d_matches_loops() {
    let mut r = rng(101);
    for case in 0..INSTANCES {
        let (b, ci, co) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let st = r.random_range(1..4);
        let t = st * r.random_range(1..3);
        let k = [1, 3][r.random_range(0..2)];
        let (h, w) = (r.random_range(k.max(2)..7), r.random_range(k.max(2)..7));
        let pad = k / 2;
        let x = uniform(&[b, ci, t, h, w], -1.0, 1.0, &mut r);
        let wt = uniform(&[co, ci, st, k, k], -1.0, 1.0, &mut r);
        let bias = uniform(&[co], -1.0, 1.0, &mut r);

        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(bias.clone()));
        let y = tape.conv3d_temporal(xv, wv, Some(bv), st, pad).unwrap();
        let got = tape.value(y);

        let frames = t / st;
        assert_eq!(got.shape(), &[b, co, frames, h, w], "case {case}");
        let mut want = Vec::new();
        for bi in 0..b {
            for o in 0..co {
                for l in 0..frames {
                    for oy in 0..h {
                        for ox in 0..w {
                            let mut acc = at(&bias, &[o]);
                            for c in 0..ci {
                                for tau in 0..st {
                                    for i in 0..k {
                                        for j in 0..k {
                                            let iy = (oy + i) as isize - pad as isize;
                                            let ix = (ox + j) as isize - pad as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            acc += at(&x, &[bi, c, l * st + tau, iy as usize, ix as usize])
                                                * at(&wt, &[o, c, tau, i, j]);
                                        }
                                    }
                                }
                            }
                            want.push(acc);
                        }
                    }
                }
            }
        }
        close(&format!("conv3d case {case}"), got.data(), &want);
    }
}

pub fn coarsen_matches_loops() {
    let mut r = rng(102);
    for case in 0..INSTANCES {
        let n = r.random_range(1..5);
        let (t, h, w) = (r.random_range(1..4), r.random_range(1..3), r.random_range(1..3));
        let fine = uniform(&[t, h * n, w * n], 0.0, 100.0, &mut r);
        let got = coarsen(&fine, n).unwrap();
        assert_eq!(got.shape(), &[t, h, w]);
        let mut want = Vec::new();
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            acc += at(&fine, &[ti, y * n + i, x * n + j]);
                        }
                    }
                    want.push(acc);
                }
            }
        }
        close(&format!("coarsen case {case}"), got.data(), &want);
    }
}

pub fn pixel_shuffle_matches_loops() {
    let mut r = rng(103);
    for case in 0..INSTANCES {
        let f = r.random_range(1..4);
        let (b, c, h, w) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let x = uniform(&[b, c * f * f, h, w], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.pixel_shuffle(xv, f).unwrap();
        let back = tape.pixel_unshuffle(y, f).unwrap();
        let got = tape.value(y);
        assert_eq!(got.shape(), &[b, c, h * f, w * f]);
        let mut want = Vec::new();
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..h * f {
                    for ox in 0..w * f {
                        let sub = ci * f * f + (oy % f) * f + ox % f;
                        want.push(at(&x, &[bi, sub, oy / f, ox / f]));
                    }
                }
            }
        }
        close(&format!("pixel shuffle case {case}"), got.data(), &want);
        close(&format!("pixel unshuffle case {case}"), tape.value(back).data(), x.data());
    }
}

pub fn matmul_matches_loops() {
    let mut r = rng(104);
    for case in 0..INSTANCES {
        let (m, k, n) = (r.random_range(1..9), r.random_range(1..9), r.random_range(1..9));
        let a = uniform(&[m, k], -1.0, 1.0, &mut r);
        let b = uniform(&[k, n], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.matmul(av, bv).unwrap();
        let mut want = Vec::new();
        for i in 0..m {
            for j in 0..n {
                want.push((0..k).map(|l| at(&a, &[i, l]) * at(&b, &[l, j])).sum());
            }
        }
        close(&format!("matmul case {case}"), tape.value(y).data(), &want);
    }
}

pub fn metrics_match_direct_formulas() {
    let mut r = rng(105);
    for case in 0..INSTANCES {
        let (s, h, w) = (r.random_range(1..4), r.random_range(1..9), r.random_range(1..9));
        let truth = Tensor::from_fn(&[s, h, w], |_| if r.random_bool(0.2) { 0.0 } else { r.random_range(0.0..50.0) })
            .unwrap();
        let pred = uniform(&[s, h, w], 0.0, 50.0, &mut r);
        let got = evaluate(&pred, &truth).unwrap();

        let (p, t) = (pred.data(), truth.data());
        let n = p.len() as f64;
        let rmse = (p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        let mae = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let mean_t = t.iter().sum::<f64>() / n;
        let pos: Vec<(f64, f64)> = p.iter().zip(t).filter(|(_, &b)| b > 0.0).map(|(&a, &b)| (a, b)).collect();
        let mape = (!pos.is_empty()).then(|| pos.iter().map(|(a, b)| (a - b).abs() / b).sum::<f64>() / pos.len() as f64);
        // Pearson via raw moments rather than centred sums.
        let (sp, st) = (p.iter().sum::<f64>(), t.iter().sum::<f64>());
        let spp = p.iter().map(|a| a * a).sum::<f64>();
        let stt = t.iter().map(|b| b * b).sum::<f64>();
        let spt = p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
        let cov = spt / n - sp * st / (n * n);
        let vp = spp / n - (sp / n).powi(2);
        let vt = stt / n - (st / n).powi(2);
        let corr = if vp <= 1e-12 || vt <= 1e-12 { 0.0 } else { cov / (vp * vt).sqrt() };

        let name = format!("metrics case {case}");
        close(&name, &[got.rmse, got.mae], &[rmse, mae]);
        if mean_t > 0.0 {
            close(&name, &[got.nrmse], &[rmse / mean_t]);
        } else {
            assert!(got.nrmse.is_nan(), "{name}: NRMSE of an empty truth");
        }
        match (got.mape, mape) {
            (Some(a), Some(b)) => close(&name, &[a], &[b]),
            (None, None) => {}
            other => panic!("{name}: MAPE mismatch {other:?}"),
        }
        close(&format!("{name} corr"), &[got.corr], &[corr]);
        assert_eq!((got.n_slots, got.n_cells), (s, h * w));
    }
}
