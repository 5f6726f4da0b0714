//! Gridded population and POI data, coarsening, windowing and splits.

mod format;

pub use format::{load_grid, read_pgrd, save_grid, sidecar_path, write_pgrd, GridMeta, PGRD_MAGIC, PGRD_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Slots per day (30-minute slots).
pub const SLOTS_PER_DAY: usize = 48;
/// Slots per week; the target-city test period.
pub const WEEK_SLOTS: usize = 7 * SLOTS_PER_DAY;

pub const POI_CATEGORIES: [&str; 14] = [
    "residence",
    "education",
    "healthcare",
    "shopping",
    "catering",
    "leisure",
    "sports",
    "transport",
    "hotel",
    "finance",
    "government",
    "industry",
    "company",
    "office",
];

/// Population per cell per slot, `[T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationSeries<S = f64> {
    pub values: Tensor<S>,
    pub slot_minutes: u32,
    pub cell_meters: u32,
}

impl<S: Scalar> PopulationSeries<S> {
    pub fn new(values: Tensor<S>, cell_meters: u32) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(format!("population series must be [T, H, W], got {:?}", values.shape())));
        }
        if values.data().iter().any(|&v| v < S::zero() || !v.is_finite()) {
            return Err(Error::Data("population values must be finite and non-negative".into()));
        }
        Ok(Self { values, slot_minutes: 30, cell_meters })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Frame `t` as `[1, H, W]`.
    pub fn frame(&self, t: usize) -> Tensor<S> {
        frame(&self.values, t)
    }

    /// Mean population of one cell in one slot.
    pub fn mean_cell(&self) -> S {
        self.values.mean()
    }
}

/// POI counts per category per fine cell, `[C, nH, nW]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoiMap<S = f64> {
    pub counts: Tensor<S>,
    pub categories: Vec<String>,
}

impl<S: Scalar> PoiMap<S> {
    pub fn new(counts: Tensor<S>, categories: Vec<String>) -> Result<Self> {
        if counts.rank() != 3 || counts.shape()[0] != categories.len() {
            return Err(Error::shape(format!(
                "POI map {:?} does not match {} categories",
                counts.shape(),
                categories.len()
            )));
        }
        if counts.data().iter().any(|&v| v < S::zero() || v.fract() != S::zero()) {
            return Err(Error::Data("POI counts must be non-negative integers".into()));
        }
        Ok(Self { counts, categories })
    }

    /// Per-category scale-free encoding `ln(1 + count / mean_count)`, so
    /// cities and grid resolutions with different densities look alike to
    /// the generator. Returns `[1, C, nH, nW]`.
    pub fn features(&self) -> Tensor<S> {
        let s = self.counts.shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let mut out = self.counts.data().to_vec();
        for ch in 0..c {
            let plane = &mut out[ch * hw..(ch + 1) * hw];
            let mean = plane.iter().copied().sum::<S>() / S::of(hw as f64);
            for v in plane.iter_mut() {
                *v = if mean > S::zero() { (S::one() + *v / mean).ln() } else { S::zero() };
            }
        }
        Tensor::new(&[1, c, s[1], s[2]], out).expect("same element count")
    }

    /// Sums counts over `n×n` blocks.
    pub fn coarsen(&self, n: usize) -> Result<Self> {
        Ok(Self { counts: coarsen(&self.counts, n)?, categories: self.categories.clone() })
    }
}

/// The single fine-grained observation available in the target city.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSnapshot<S = f64> {
    pub values: Tensor<S>,
    pub slot_index: usize,
}

/// One training/evaluation example: a coarse window and the fine frame of
/// its last slot.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample<S = f64> {
    /// `[T_w, H, W]`
    pub coarse_seq: Tensor<S>,
    /// `[1, nH, nW]`
    pub fine_target: Tensor<S>,
    /// Slot of day of the last frame, `0..48`.
    pub t_of_day: usize,
    /// Absolute slot index of the last frame in its series.
    pub slot: usize,
}

impl<S: Scalar> WindowSample<S> {
    pub fn last_coarse(&self) -> Tensor<S> {
        let t = self.coarse_seq.shape()[0];
        frame(&self.coarse_seq, t - 1)
    }

    /// Largest relative deviation between `coarsen(fine_target)` and the
    /// last coarse frame.
    pub fn consistency_error(&self, n: usize) -> Result<f64> {
        let pooled = coarsen(&self.fine_target, n)?;
        Ok(relative_error(&pooled, &self.last_coarse()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Frame `t` of a `[T, H, W]` tensor as `[1, H, W]`.
pub fn frame<S: Scalar>(series: &Tensor<S>, t: usize) -> Tensor<S> {
    let s = series.shape();
    let hw = s[1] * s[2];
    Tensor::new(&[1, s[1], s[2]], series.data()[t * hw..(t + 1) * hw].to_vec()).expect("frame in range")
}

/// Frames `[start, start + len)` of a `[T, H, W]` tensor.
pub fn frames<S: Scalar>(series: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let s = series.shape();
    let hw = s[1] * s[2];
    Tensor::new(&[len, s[1], s[2]], series.data()[start * hw..(start + len) * hw].to_vec()).expect("frames in range")
}

/// `max |a - b| / max(max |b|, tiny)`.
pub fn relative_error<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let scale = b.data().iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max).max(1e-300);
    a.max_abs_diff(b).as_f64() / scale
}

/// Non-overlapping `n×n` sum pooling over the last two axes.
pub fn coarsen<S: Scalar>(fine: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    let s = fine.shape();
    let r = s.len();
    if r < 2 || n == 0 || !s[r - 2].is_multiple_of(n) || !s[r - 1].is_multiple_of(n) {
        return Err(Error::shape(format!("cannot coarsen {s:?} by {n}")));
    }
    let (h, w) = (s[r - 2] / n, s[r - 1] / n);
    let planes: usize = s[..r - 2].iter().product();
    let fw = w * n;
    let mut out = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        let src = &fine.data()[p * h * w * n * n..(p + 1) * h * w * n * n];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h * n {
            let row = &src[y * fw..(y + 1) * fw];
            let drow = &mut dst[(y / n) * w..(y / n + 1) * w];
            for (x, &v) in row.iter().enumerate() {
                drow[x / n] = drow[x / n] + v;
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(&shape, out)
}

/// One sample per end slot `t ∈ [T_w - 1, T - 1]`.
pub fn make_windows<S: Scalar>(
    series: &PopulationSeries<S>,
    n: usize,
    window: usize,
) -> Result<Vec<WindowSample<S>>> {
    if window == 0 || series.len() < window {
        return Err(Error::Data(format!(
            "series of {} slots is shorter than the window of {window}",
            series.len()
        )));
    }
    let coarse = coarsen(&series.values, n)?;
    Ok((window - 1..series.len())
        .map(|t| WindowSample {
            coarse_seq: frames(&coarse, t + 1 - window, window),
            fine_target: series.frame(t),
            t_of_day: t % SLOTS_PER_DAY,
            slot: t,
        })
        .collect())
}

/// Windows over a coarse series with no fine ground truth; `fine_target`
/// is filled with the nearest-upsampled uniform split so shapes stay valid.
pub fn coarse_windows<S: Scalar>(coarse: &Tensor<S>, n: usize, window: usize, slots: &[usize]) -> Result<Vec<WindowSample<S>>> {
    let t_len = coarse.shape()[0];
    slots
        .iter()
        .map(|&t| {
            if t + 1 < window || t >= t_len {
                return Err(Error::Data(format!("no coarse window of {window} ends at slot {t}")));
            }
            let last = frame(coarse, t);
            let (h, w) = (last.shape()[1], last.shape()[2]);
            let inv = S::one() / S::of((n * n) as f64);
            let fine = Tensor::from_fn(&[1, h * n, w * n], |i| {
                let (y, x) = (i / (w * n), i % (w * n));
                last.data()[(y / n) * w + x / n] * inv
            })?;
            Ok(WindowSample { coarse_seq: frames(coarse, t + 1 - window, window), fine_target: fine, t_of_day: t % SLOTS_PER_DAY, slot: t })
        })
        .collect()
}

/// Seeded shuffle followed by a 70/15/15 partition.
pub fn split_source(n_samples: usize, seed: u64) -> Result<DatasetSplit> {
    let n_train = (n_samples as f64 * 0.70 + 1e-9).floor() as usize;
    let n_val = (n_samples as f64 * 0.15 + 1e-9).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n_samples {
        return Err(Error::Data(format!("{n_samples} samples are too few for a 70/15/15 split")));
    }
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(DatasetSplit {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

/// The final `week_slots` samples form the test set; the fine frame of the
/// first test sample is the reference.
pub fn split_target<S: Scalar>(
    samples: &[WindowSample<S>],
    week_slots: usize,
) -> Result<(ReferenceSnapshot<S>, Vec<usize>)> {
    if week_slots == 0 || samples.len() < week_slots {
        return Err(Error::Data(format!(
            "{} target samples cannot supply a test period of {week_slots}",
            samples.len()
        )));
    }
    let start = samples.len() - week_slots;
    let first = &samples[start];
    Ok((
        ReferenceSnapshot { values: first.fine_target.clone(), slot_index: first.slot },
        (start..samples.len()).collect(),
    ))
}
