//! Synthetic cities with diurnal population dynamics and POI maps derived
//! from the same latent land-use fields.
//!
//! Each city has a residential intensity field `R` and a work field `W`,
//! both sums of Gaussian hotspots normalised to mean 1. Population in slot
//! `t` is `base · ((1 - d(t)) R + d(t) W)` plus bounded Poisson-like noise,
//! where the work share `d(t)` follows a 48-slot cosine with a per-day
//! amplitude jitter. POI categories are a softmax split of a total POI
//! density, with logits interpolating between `ln R` (category 0,
//! residence) and `ln W` (the last category).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PoiMap, PopulationSeries, POI_CATEGORIES, SLOTS_PER_DAY};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CitySpec {
    pub name: String,
    pub seed: u64,
    pub fine_h: usize,
    pub fine_w: usize,
    pub upscale: usize,
    pub days: usize,
    pub n_centers: usize,
    /// Structural dissimilarity knob in `[0, 1]`; larger values give
    /// tighter hotspots.
    pub shift: f64,
    /// Mean population of one fine cell.
    pub base: f64,
    /// Noise scale relative to a Poisson standard deviation.
    pub noise: f64,
    pub cell_meters: u32,
}

impl Default for CitySpec {
    fn default() -> Self {
        Self {
            name: "city".into(),
            seed: 0,
            fine_h: 32,
            fine_w: 32,
            upscale: 4,
            days: 14,
            n_centers: 6,
            shift: 0.0,
            base: 50.0,
            noise: 0.5,
            cell_meters: 500,
        }
    }
}

impl CitySpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.upscale == 0 || !self.fine_h.is_multiple_of(self.upscale) || !self.fine_w.is_multiple_of(self.upscale) {
            return fail(format!("{}x{} grid is not divisible by {}", self.fine_h, self.fine_w, self.upscale));
        }
        if self.fine_h == 0 || self.fine_w == 0 {
            return fail("empty grid".into());
        }
        if self.days < 2 {
            return fail(format!("a city needs at least 2 days, got {}", self.days));
        }
        if self.n_centers == 0 {
            return fail("a city needs at least one hotspot".into());
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return fail(format!("shift {} outside [0, 1]", self.shift));
        }
        if !(self.base > 0.0 && self.base.is_finite()) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("base must be positive and noise non-negative".into());
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.days * SLOTS_PER_DAY
    }
}

/// A generated city. The latent fields are kept for diagnostics.
#[derive(Clone, Debug)]
pub struct City<S: Scalar = f64> {
    pub spec: CitySpec,
    pub population: PopulationSeries<S>,
    pub poi: PoiMap<S>,
    pub residential: Vec<f64>,
    pub work: Vec<f64>,
}

struct Hotspot {
    y: f64,
    x: f64,
    sigma: f64,
    amp: f64,
}

fn hotspot_field(h: usize, w: usize, spots: &[Hotspot], background: f64) -> Vec<f64> {
    let mut f = vec![background; h * w];
    for (i, v) in f.iter_mut().enumerate() {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        for s in spots {
            let d2 = (y - s.y).powi(2) + (x - s.x).powi(2);
            *v += s.amp * (-d2 / (2.0 * s.sigma * s.sigma)).exp();
        }
    }
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.iter_mut().for_each(|v| *v /= mean);
    f
}

fn sample_spots<R: Rng>(rng: &mut R, count: usize, h: usize, w: usize, sigma: (f64, f64), amp: (f64, f64)) -> Vec<Hotspot> {
    (0..count)
        .map(|_| Hotspot {
            y: rng.random_range(0.0..h as f64),
            x: rng.random_range(0.0..w as f64),
            sigma: rng.random_range(sigma.0..sigma.1),
            amp: rng.random_range(amp.0..amp.1),
        })
        .collect()
}

/// Work share of the population in slot-of-day `s`, before the daily
/// amplitude jitter: 0 at 03:00, peaking at 15:00.
pub fn work_share(slot_of_day: usize) -> f64 {
    let phase = 2.0 * PI * (slot_of_day as f64 - 6.0) / SLOTS_PER_DAY as f64;
    0.35 * (1.0 - phase.cos())
}

pub fn generate_city<S: Scalar>(spec: &CitySpec) -> Result<City<S>> {
    spec.validate()?;
    let (h, w) = (spec.fine_h, spec.fine_w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma0 = 0.08 * h.min(w) as f64 * (1.0 - 0.5 * spec.shift);
    let res_spots = sample_spots(&mut rng, spec.n_centers, h, w, (0.8 * sigma0, 1.6 * sigma0), (0.5, 1.5));
    let work_spots = sample_spots(&mut rng, spec.n_centers.div_ceil(2), h, w, (0.5 * sigma0, sigma0), (1.0, 2.0));
    let residential = hotspot_field(h, w, &res_spots, 0.05);
    let work = hotspot_field(h, w, &work_spots, 0.02);

    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let slots = spec.slots();
    let mut values = Vec::with_capacity(slots * h * w);
    for day in 0..spec.days {
        let jitter = rng.random_range(0.8..1.2);
        for s in 0..SLOTS_PER_DAY {
            let d = (jitter * work_share(s)).min(1.0);
            for (r, wk) in residential.iter().zip(&work) {
                let lambda = spec.base * ((1.0 - d) * r + d * wk);
                let z: f64 = std_normal.sample(&mut rng);
                let v = lambda + spec.noise * lambda.sqrt() * z.clamp(-3.0, 3.0);
                values.push(S::of(v.round().max(0.0)));
            }
        }
        debug_assert_eq!(values.len(), (day + 1) * SLOTS_PER_DAY * h * w);
    }
    let population = PopulationSeries::new(Tensor::new(&[slots, h, w], values)?, spec.cell_meters)?;

    let c = POI_CATEGORIES.len();
    let cat_noise = Normal::new(0.0, 0.3).expect("valid normal");
    let bias: Vec<f64> = (0..c).map(|_| 0.5 * std_normal.sample(&mut rng)).collect();
    let mut counts = vec![S::zero(); c * h * w];
    let mut logits = vec![0.0; c];
    for i in 0..h * w {
        let (lr, lw) = (residential[i].ln(), work[i].ln());
        for (k, l) in logits.iter_mut().enumerate() {
            let pi = k as f64 / (c - 1) as f64;
            *l = 2.5 * ((1.0 - pi) * lr + pi * lw) + bias[k] + cat_noise.sample(&mut rng);
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let density = 4.0 * (0.6 * residential[i] + 0.4 * work[i]);
        for (k, l) in logits.iter().enumerate() {
            counts[k * h * w + i] = S::of((density * (l - m).exp() / z * c as f64 / 2.0).round());
        }
    }
    let poi = PoiMap::new(
        Tensor::new(&[c, h, w], counts)?,
        POI_CATEGORIES.iter().map(|s| s.to_string()).collect(),
    )?;
    Ok(City { spec: spec.clone(), population, poi, residential, work })
}

/// The default source/target pair: same physics, different seeds, and a
/// structural shift in the target.
pub fn default_pair(seed: u64) -> (CitySpec, CitySpec) {
    let source = CitySpec { name: "source".into(), seed: seed.wrapping_mul(2).wrapping_add(1), ..CitySpec::default() };
    let target = CitySpec {
        name: "target".into(),
        seed: seed.wrapping_mul(2).wrapping_add(2),
        shift: 0.3,
        ..CitySpec::default()
    };
    (source, target)
}
