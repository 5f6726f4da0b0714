//! Every fine frame the system produces sums back to its coarse cell.

use crate::common::*;
use popmap_core::autodiff::Tape;
use popmap_core::grid::{coarsen, frame, relative_error, PoiMap, ReferenceSnapshot, POI_CATEGORIES};
use popmap_core::pgnet::{augment_target, synthesize_series, Pgnet, PgnetConfig};
use popmap_core::stnet::{Stnet, StnetConfig};
use popmap_core::Tensor;
use rand::Rng;

const CASES: usize = 100;
const TOL: f64 = 1e-6;

/// Per-cell relative mismatch between pooled fine frames and the coarse
/// frame, with a unit floor for empty cells.
fn worst_mismatch(pooled: &Tensor<f64>, coarse: &Tensor<f64>) -> f64 {
    pooled
        .data()
        .iter()
        .zip(coarse.data())
        .map(|(p, c)| (p - c).abs() / c.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn random_stnet_config(r: &mut impl Rng) -> StnetConfig {
    let time_stride = r.random_range(1..4);
    StnetConfig {
        seq_len: time_stride * r.random_range(1..4),
        time_stride,
        base_channels: r.random_range(1..5),
        time_channels: r.random_range(1..4),
        block_width: r.random_range(1..5),
        upscale: [2, 4][r.random_range(0..2)],
        temporal: r.random_bool(0.7),
    }
}

/// Replaces every trainable tensor with fresh random values, so the check
/// is not limited to the initializer's distribution.
fn scramble(model: &mut Stnet<f64>, r: &mut impl Rng) {
    let ids: Vec<_> = model.store.ids().filter(|&id| model.store.get(id).requires_grad()).collect();
    let scale = r.random_range(0.1..3.0);
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
}

pub fn stnet_output_sums_to_last_coarse_frame() {
    let mut r = rng(200);
    for case in 0..CASES {
        let config = random_stnet_config(&mut r);
        let mut model = Stnet::<f64>::new(&config, r.random()).unwrap();
        if case % 2 == 1 {
            scramble(&mut model, &mut r);
        }
        let (b, h, w) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
        let hi = [1.0, 100.0, 1e4][r.random_range(0..3)];
        let x = Tensor::from_fn(&[b, config.seq_len, h, w], |_| {
            if r.random_bool(0.1) { 0.0 } else { r.random_range(0.0..hi) }
        })
        .unwrap();
        let training = r.random_bool(0.5);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = model.forward(&mut tape, xv, training).unwrap();
        let y = tape.value(y);
        let n = config.upscale;
        assert_eq!(y.shape(), &[b, 1, h * n, w * n]);
        assert!(y.data().iter().all(|v| v.is_finite() && *v >= 0.0), "case {case}: negative or non-finite output");

        let pooled = coarsen(y, n).unwrap();
        let t = config.seq_len;
        let last: Vec<f64> = (0..b).flat_map(|bi| x.data()[(bi * t + t - 1) * h * w..(bi * t + t) * h * w].to_vec()).collect();
        let last = Tensor::new(&[b, 1, h, w], last).unwrap();
        let err = worst_mismatch(&pooled, &last);
        assert!(err <= TOL, "case {case} ({config:?}): mismatch {err:e}");
    }
}

pub fn snet_output_sums_to_coarse_frame() {
    let mut r = rng(201);
    for case in 0..20 {
        let config = StnetConfig { temporal: false, ..random_stnet_config(&mut r) };
        let mut model = Stnet::<f64>::new(&config, case).unwrap();
        let (h, w) = (r.random_range(1..5), r.random_range(1..5));
        let c = uniform(&[2, 1, h, w], 0.0, 500.0, &mut r);
        let mut tape = Tape::new();
        let cv = tape.constant(c.clone());
        let y = model.snet_forward(&mut tape, cv, false).unwrap();
        let pooled = coarsen(tape.value(y), config.upscale).unwrap();
        assert!(worst_mismatch(&pooled, &c) <= TOL, "case {case}");
    }
}

fn random_poi(h: usize, w: usize, r: &mut impl Rng) -> PoiMap<f64> {
    let c = POI_CATEGORIES.len();
    let counts = Tensor::from_fn(&[c, h, w], |_| r.random_range(0..6) as f64).unwrap();
    PoiMap::new(counts, POI_CATEGORIES.iter().map(|s| s.to_string()).collect()).unwrap()
}

pub fn synthesized_frames_sum_to_coarse_frames() {
    let mut r = rng(202);
    for case in 0..CASES {
        let n = [2, 4][r.random_range(0..2)];
        let (h, w) = (r.random_range(1..4), r.random_range(1..4));
        let frames = r.random_range(1..8);
        let config = PgnetConfig {
            gen_channels: r.random_range(1..4),
            embed_dim: r.random_range(1..4),
            lstm_context: r.random_range(1..5),
            frames,
            disc_channels: 1,
            disc_layers: 1,
            ..PgnetConfig::desk(h * n, w * n, n)
        };
        let mut model = Pgnet::<f64>::new(&config, r.random()).unwrap();
        let window = r.random_range(1..5);
        let t_len = frames + window + r.random_range(2..6);
        let coarse = Tensor::from_fn(&[t_len, h, w], |_| {
            if r.random_bool(0.1) { 0.0 } else { r.random_range(0.0..400.0) }
        })
        .unwrap();
        let (lf, lb) = popmap_core::pgnet::split_frames(frames);
        let slot = r.random_range(lb + window - 1..t_len - lf);
        let reference = ReferenceSnapshot { values: uniform(&[1, h * n, w * n], 0.0, 30.0, &mut r), slot_index: slot };
        let poi = random_poi(h * n, w * n, &mut r);

        let samples = augment_target(&reference, &poi, &coarse, &mut model, frames, window, n).unwrap();
        assert_eq!(samples.len(), frames);
        for s in &samples {
            assert!(s.fine_target.data().iter().all(|v| v.is_finite() && *v >= 0.0));
            let pooled = coarsen(&s.fine_target, n).unwrap();
            let err = worst_mismatch(&pooled, &frame(&coarse, s.slot));
            assert!(err <= TOL, "case {case} slot {}: mismatch {err:e}", s.slot);
            assert_eq!(s.last_coarse(), frame(&coarse, s.slot));
        }
    }
}

pub fn arbitrary_flows_still_respect_the_constraint() {
    // Large flows of either sign drive cells negative before projection.
    let mut r = rng(203);
    for case in 0..CASES {
        let n = [2, 4, 8][r.random_range(0..3)];
        let (h, w) = (r.random_range(1..3), r.random_range(1..3));
        let (lf, lb) = (r.random_range(0..4), r.random_range(0..4));
        let t_len = lf + lb + 1;
        let coarse = uniform(&[t_len, h, w], 0.0, 1000.0, &mut r);
        let reference = ReferenceSnapshot { values: uniform(&[1, h * n, w * n], 0.0, 50.0, &mut r), slot_index: lb };
        let flow = |r: &mut _| uniform(&[1, h * n, w * n], -200.0, 200.0, r);
        let fwd: Vec<_> = (0..lf).map(|_| flow(&mut r)).collect();
        let bwd: Vec<_> = (0..lb).map(|_| flow(&mut r)).collect();
        let out = synthesize_series(&reference, &fwd, &bwd, &coarse, n).unwrap();
        let pooled = coarsen(&out, n).unwrap();
        assert!(relative_error(&pooled, &coarse) <= TOL, "case {case}");
    }
}
