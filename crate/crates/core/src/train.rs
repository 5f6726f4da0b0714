//! Batching and the STNet training loops shared by pre-training,
//! fine-tuning and adaptation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::grid::WindowSample;
use crate::metrics::{evaluate, MetricReport};
use crate::nn::mse;
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::stnet::Stnet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Validate every this many steps (0 disables validation).
    pub eval_every: usize,
    /// Stop after this many validations without improvement.
    pub patience: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 300, batch_size: 8, lr: 1e-3, eval_every: 20, patience: 10 }
    }
}

impl TrainOptions {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Epoch-wise shuffled mini-batches of indices `0..len`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..len).collect(), pos: len }
    }

    /// The next `size` indices (fewer only if `len < size`), reshuffling at
    /// each epoch boundary.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Stacks windows into `x[B, T, H, W]` and targets `y[B, 1, nH, nW]`.
pub fn stack_windows<S: Scalar>(samples: &[&WindowSample<S>]) -> Result<(Tensor<S>, Tensor<S>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (xs, ys) = (first.coarse_seq.shape().to_vec(), first.fine_target.shape().to_vec());
    let mut x = Vec::with_capacity(samples.len() * first.coarse_seq.numel());
    let mut y = Vec::with_capacity(samples.len() * first.fine_target.numel());
    for s in samples {
        if s.coarse_seq.shape() != xs.as_slice() || s.fine_target.shape() != ys.as_slice() {
            return Err(Error::shape("windows in one batch must share shapes"));
        }
        x.extend_from_slice(s.coarse_seq.data());
        y.extend_from_slice(s.fine_target.data());
    }
    let b = samples.len();
    Ok((Tensor::new(&[b, xs[0], xs[1], xs[2]], x)?, Tensor::new(&[b, 1, ys[1], ys[2]], y)?))
}

fn check_loss(stage: &str, step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Train { stage: stage.to_string(), detail: format!("loss {loss} at step {step}") });
    }
    Ok(())
}

/// One MSE step on a stacked batch. Returns the loss.
pub fn stnet_step<S: Scalar>(
    model: &mut Stnet<S>,
    adam: &mut AdamState<S>,
    x: Tensor<S>,
    y: Tensor<S>,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let pred = model.forward(&mut tape, xv, true)?;
    let loss = mse(&mut tape, pred, yv)?;
    let value = tape.value(loss).data()[0].as_f64();
    check_loss("stnet", step, value)?;
    tape.backward_into(loss, &mut model.store)?;
    adam.step_store(&mut model.store)?;
    Ok(value)
}

/// Evaluation-mode predictions `[S, nH, nW]` for a list of windows.
pub fn predict_windows<S: Scalar>(model: &mut Stnet<S>, samples: &[&WindowSample<S>], batch: usize) -> Result<Tensor<S>> {
    let mut out = Vec::new();
    let mut shape = None;
    for chunk in samples.chunks(batch.max(1)) {
        let (x, _) = stack_windows(chunk)?;
        let y = model.infer(&x)?;
        shape.get_or_insert_with(|| y.shape()[2..].to_vec());
        out.extend_from_slice(y.data());
    }
    let hw = shape.ok_or_else(|| Error::Data("no windows to predict".into()))?;
    Tensor::new(&[samples.len(), hw[0], hw[1]], out)
}

/// Fine targets of windows stacked as `[S, nH, nW]`.
pub fn stack_targets<S: Scalar>(samples: &[&WindowSample<S>]) -> Result<Tensor<S>> {
    let first = samples.first().ok_or_else(|| Error::Data("no windows".into()))?;
    let s = first.fine_target.shape();
    let data = samples.iter().flat_map(|w| w.fine_target.data().iter().copied()).collect();
    Tensor::new(&[samples.len(), s[1], s[2]], data)
}

pub fn evaluate_windows<S: Scalar>(model: &mut Stnet<S>, samples: &[&WindowSample<S>], batch: usize) -> Result<MetricReport> {
    let pred = predict_windows(model, samples, batch)?;
    evaluate(&pred, &stack_targets(samples)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// `(step, val RMSE)` after that many steps.
    pub val_rmse: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
}

/// Minimizes MSE with Adam. With a validation set the model is evaluated
/// every `eval_every` steps, training stops after `patience` evaluations
/// without improvement, and the best parameters are restored. Without one
/// the final parameters are kept.
pub fn train_stnet<S: Scalar>(
    model: &mut Stnet<S>,
    train: &[&WindowSample<S>],
    val: &[&WindowSample<S>],
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let mut sampler = BatchSampler::new(train.len(), seed);
    let mut adam = AdamState::new(opts.adam());
    let mut log = TrainLog::default();
    let validate = !val.is_empty() && opts.eval_every > 0;
    let mut best = None;
    let mut stale = 0;
    for step in 0..opts.steps {
        let idx = sampler.next_batch(opts.batch_size);
        let batch: Vec<&WindowSample<S>> = idx.iter().map(|&i| train[i]).collect();
        let (x, y) = stack_windows(&batch)?;
        log.losses.push(stnet_step(model, &mut adam, x, y, step)?);
        if validate && (step + 1) % opts.eval_every == 0 {
            let rmse = evaluate_windows(model, val, opts.batch_size.max(8))?.rmse;
            log::debug!("step {} loss {:.4} val rmse {rmse:.4}", step + 1, log.losses[step]);
            log.val_rmse.push((step + 1, rmse));
            if log.best_val.is_none_or(|b| rmse < b) {
                log.best_val = Some(rmse);
                log.best_step = step + 1;
                best = Some(model.store.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= opts.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some(b) = best {
        model.store.load_values(&b)?;
    } else {
        log.best_step = log.losses.len();
    }
    Ok(log)
}
