//! Flow targets, their accumulation, and synthesis with degenerate flows.

use popmap_core::grid::{coarsen, frame, ReferenceSnapshot};
use popmap_core::nn::n2_project;
use popmap_core::pgnet::{flow_targets, split_frames, synthesize_series};
use popmap_core::Tensor;
use proptest::prelude::*;
use proptest::test_runner::Config;

/// Failures are reported, not persisted: this file is compiled into more
/// than one test target.
fn config() -> Config {
    Config { failure_persistence: None, ..Config::default() }
}

/// `X[0] + Σ_{j<t} Δ[j]` for every `t`.
fn prefix_sum(first: &Tensor<f64>, flows: &Tensor<f64>) -> Tensor<f64> {
    let hw = first.numel();
    let t = flows.shape()[0] + 1;
    let mut data = first.data().to_vec();
    for k in 0..t - 1 {
        let next: Vec<f64> = (0..hw).map(|i| data[k * hw + i] + flows.data()[k * hw + i]).collect();
        data.extend(next);
    }
    Tensor::new(&[t, flows.shape()[1], flows.shape()[2]], data).unwrap()
}

fn series_strategy(max: i64) -> impl Strategy<Value = Tensor<f64>> {
    (2usize..12, 1usize..6, 1usize..6).prop_flat_map(move |(t, h, w)| {
        proptest::collection::vec(0..=max, t * h * w)
            .prop_map(move |v| Tensor::new(&[t, h, w], v.into_iter().map(|x| x as f64).collect()).unwrap())
    })
}

pub fn counts_are_reconstructed_exactly() {
    proptest!(config(), |(series in series_strategy(5000))| {
        let flows = flow_targets(&series).unwrap();
        prop_assert_eq!(flows.shape()[0], series.shape()[0] - 1);
        let rebuilt = prefix_sum(&frame(&series, 0), &flows);
        prop_assert_eq!(rebuilt, series);
    });
}

pub fn real_series_are_reconstructed() {
    let strategy = (2usize..10, 1usize..5, 1usize..5)
        .prop_flat_map(|(t, h, w)| (Just(t), Just(h), Just(w), proptest::collection::vec(-1e3f64..1e3, t * h * w)));
    proptest!(config(), |((t, h, w, data) in strategy)| {
        let series = Tensor::new(&[t, h, w], data).unwrap();
        let rebuilt = prefix_sum(&frame(&series, 0), &flow_targets(&series).unwrap());
        for (a, b) in rebuilt.data().iter().zip(series.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * 1e3 * t as f64);
        }
    });
}

pub fn zero_flows_give_projected_reference() {
    proptest!(config(), |(
        f in 1usize..12,
        n in prop::sample::select(vec![2usize, 4]),
        (h, w) in (1usize..4, 1usize..4),
        seed in any::<u64>(),
    )| {
        let (lf, lb) = split_frames(f);
        prop_assert_eq!(lf + lb + 1, f);
        let t_len = f + 3;
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f64 / (1u64 << 24) as f64
        };
        let reference = ReferenceSnapshot {
            values: Tensor::from_fn(&[1, h * n, w * n], |_| 40.0 * next()).unwrap(),
            slot_index: lb + 1,
        };
        let coarse = Tensor::from_fn(&[t_len, h, w], |_| 500.0 * next()).unwrap();
        let zero = Tensor::zeros(&[1, h * n, w * n]).unwrap();
        let out = synthesize_series(&reference, &vec![zero.clone(); lf], &vec![zero; lb], &coarse, n).unwrap();
        prop_assert_eq!(out.shape(), &[f, h * n, w * n]);

        let raw = reference.values.reshape(&[1, 1, h * n, w * n]).unwrap();
        for k in 0..f {
            let slot = reference.slot_index - lb + k;
            let c = frame(&coarse, slot).reshape(&[1, 1, h, w]).unwrap();
            let want = n2_project(&raw, &c, n).unwrap();
            let got = frame(&out, k);
            prop_assert_eq!(got.data(), want.data());
        }
    });
}

pub fn reference_slot_is_reproduced() {
    let fine = Tensor::from_fn(&[5, 4, 4], |i| ((i * 7) % 11) as f64 + 1.0).unwrap();
    let coarse = coarsen(&fine, 2).unwrap();
    let reference = ReferenceSnapshot { values: frame(&fine, 2), slot_index: 2 };
    let zero = Tensor::zeros(&[1, 4, 4]).unwrap();
    let out = synthesize_series(&reference, &[zero.clone(), zero.clone()], &[zero.clone(), zero], &coarse, 2).unwrap();
    assert!(frame(&out, 2).max_abs_diff(&reference.values) < 1e-6);
}

pub fn true_flows_rebuild_the_fine_series() {
    // With the real flows, synthesis reproduces the ground truth up to the
    // normalization epsilon.
    let fine = Tensor::from_fn(&[7, 4, 4], |i| ((i * 13) % 17) as f64 + 2.0).unwrap();
    let coarse = coarsen(&fine, 2).unwrap();
    let flows = flow_targets(&fine).unwrap();
    let r = 3;
    let reference = ReferenceSnapshot { values: frame(&fine, r), slot_index: r };
    let fwd: Vec<_> = (r..6).map(|t| frame(&flows, t)).collect();
    let bwd: Vec<_> = (0..r).map(|k| frame(&flows, r - k - 1)).collect();
    let out = synthesize_series(&reference, &fwd, &bwd, &coarse, 2).unwrap();
    assert_eq!(out.shape(), fine.shape());
    assert!(out.max_abs_diff(&fine) < 1e-6);
}
