#![allow(dead_code, unused_macros)]

/// Registers suite functions as ordinary test cases.
macro_rules! run_as_tests {
    ($suite:ident: $($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                $suite::$name()
            }
        )*
    };
}

/// A named function table for running a suite by hand.
macro_rules! suite_table {
    ($suite:ident: $($name:ident),* $(,)?) => {
        &[$((stringify!($name), $suite::$name as fn())),*]
    };
}

use popmap_core::autodiff::{Tape, Var};
use popmap_core::nn::Ctx;
use popmap_core::{ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay out of reach of the
/// finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
    .unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = tape.constant(uniform(&shape, 0.5, 1.5, &mut r));
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

/// Relative error with the `grad_check` metric, except that an exactly
/// vanishing gradient (a bias feeding batch norm) matched by
/// finite-difference roundoff counts as agreement.
fn rel(analytic: f64, fd: f64) -> f64 {
    if analytic.abs() <= 1e-10 && fd.abs() <= 1e-7 {
        return 0.0;
    }
    (analytic - fd).abs() / fd.abs().max(1e-8)
}

/// Central-difference check of the gradients a forward pass deposits in
/// `store`, probing every coordinate. Returns the worst relative error.
pub fn param_check<F>(store: &mut ParamStore<f64>, f: F) -> Result<f64>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let loss_at = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, store, true);
        let l = f(&mut cx)?;
        Ok(cx.tape.value(l).data()[0])
    };
    store.zero_grads();
    {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, store, true);
        let l = f(&mut cx)?;
        cx.backward(l)?;
    }
    let buffers = store.buffers();
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.get(id).numel();
        let analytic = store.get(id).grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + EPS;
            let plus = loss_at(store)?;
            store.get_mut(id).data_mut()[j] = orig - EPS;
            let minus = loss_at(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            store.restore_buffers(&buffers);
            let fd = (plus - minus) / (2.0 * EPS);
            let e = rel(a, fd);
            if e > worst {
                worst = e;
                if e > GRAD_TOL {
                    eprintln!("{}[{j}]: analytic {a:e}, finite difference {fd:e}", store.name(id));
                }
            }
        }
    }
    Ok(worst)
}

/// Moves zero-initialized biases off zero. With zero biases a convolution
/// over an all-zero (dead ReLU) patch outputs exactly 0 and the next ReLU
/// sits on its kink, where finite differences see half a slope.
pub fn jitter_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with(".bias") || name.ends_with(".beta") {
            for v in store.get_mut(id).data_mut() {
                let m = r.random_range(0.1..0.5);
                *v += if r.random_bool(0.5) { m } else { -m };
            }
        }
    }
}

/// Small smooth positive population frames `[T, H, W]`.
pub fn population(t: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f64> {
    uniform(&[t, h, w], 1.0, 50.0, rng)
}
