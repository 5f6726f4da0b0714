//! Pixel-level adversarial domain adaptation.
//!
//! A fully convolutional domain classifier labels every pixel of the STNet
//! fusion features as source (0) or target (1). Each step
//!
//! 1. updates the whole STNet on the prediction MSE of a target batch and,
//!    when a source stream is present, a source batch, plus
//!    `λ_adv ·` BCE of the classifier against inverted domain labels (only
//!    the extractor receives that gradient);
//! 2. updates the classifier on detached features with the true labels.
//!
//! Domains are forwarded separately, so source and target grids may differ
//! in size. With `λ_adv = 0` and no source windows a step is exactly a
//! plain fine-tuning step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::WindowSample;
use crate::nn::{bce, mse, Conv2d, Ctx, ResBlock};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::stnet::Stnet;
use crate::tensor::Tensor;
use crate::train::{stack_windows, stnet_step, BatchSampler};

const SOURCE_STREAM: u64 = 0x5a17_c0de_0000_0001;
const CLASSIFIER_INIT: u64 = 0x5a17_c0de_0000_0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PadaConfig {
    pub adv_weight: f64,
    pub steps: usize,
    pub target_batch: usize,
    pub source_batch: usize,
    pub lr: f64,
    pub classifier_lr: f64,
    pub classifier_channels: usize,
    pub trunk_blocks: usize,
    pub hidden: usize,
}

impl Default for PadaConfig {
    fn default() -> Self {
        Self {
            adv_weight: 0.1,
            steps: 60,
            target_batch: 4,
            source_batch: 4,
            lr: 1e-3,
            classifier_lr: 1e-3,
            classifier_channels: 16,
            trunk_blocks: 1,
            hidden: 16,
        }
    }
}

impl PadaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adv_weight >= 0.0 && self.adv_weight.is_finite()) {
            return Err(Error::Config(format!("adversarial weight {} must be non-negative", self.adv_weight)));
        }
        if self.target_batch == 0 || self.classifier_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("batch and classifier sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Conv trunk followed by a per-pixel MLP and sigmoid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub stem: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub mlp_hidden: Conv2d,
    pub mlp_out: Conv2d,
}

impl ClassifierArch {
    /// Probability of the target domain per pixel, `[B, 1, H, W]`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, features: Var) -> Result<Var> {
        let y = self.stem.forward(cx, features)?;
        let mut y = cx.tape.relu(y)?;
        for b in &self.blocks {
            y = b.forward(cx, y)?;
        }
        let y = self.mlp_hidden.forward(cx, y)?;
        let y = cx.tape.relu(y)?;
        let y = self.mlp_out.forward(cx, y)?;
        cx.tape.sigmoid(y)
    }
}

#[derive(Clone, Debug)]
pub struct DomainClassifier<S: Scalar = f64> {
    pub arch: ClassifierArch,
    pub store: ParamStore<S>,
}

impl<S: Scalar> DomainClassifier<S> {
    pub fn new(feature_channels: usize, cfg: &PadaConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.classifier_channels;
        let arch = ClassifierArch {
            stem: Conv2d::new(&mut store, "stem", feature_channels, c, 3, 1, &mut rng),
            blocks: (0..cfg.trunk_blocks).map(|i| ResBlock::new(&mut store, &format!("res{i}"), c, 1, &mut rng)).collect(),
            mlp_hidden: Conv2d::new(&mut store, "mlp.hidden", c, cfg.hidden, 1, 1, &mut rng),
            mlp_out: Conv2d::new(&mut store, "mlp.out", cfg.hidden, 1, 1, 1, &mut rng),
        };
        Self { arch, store }
    }

    pub fn forward(&mut self, tape: &mut Tape<S>, features: Var) -> Result<Var> {
        let mut cx = Ctx::new(tape, &mut self.store, true);
        self.arch.forward(&mut cx, features)
    }

    /// Value-only per-pixel probabilities.
    pub fn predict(&mut self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let p = self.forward(&mut tape, f)?;
        Ok(tape.value(p).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadaStepLog {
    pub pred_loss: f64,
    pub adv_loss: f64,
    pub cls_loss: f64,
    pub cls_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PadaLog {
    pub steps: Vec<PadaStepLog>,
}

/// Detached fusion features of one step, per domain.
pub struct DomainFeatures<S: Scalar> {
    pub target: Tensor<S>,
    pub source: Option<Tensor<S>>,
}

/// Adaptation state: the classifier, both optimizers and both streams.
pub struct PadaTrainer<S: Scalar = f64> {
    pub config: PadaConfig,
    pub classifier: DomainClassifier<S>,
    model_adam: AdamState<S>,
    cls_adam: AdamState<S>,
    target_sampler: BatchSampler,
    source_sampler: Option<BatchSampler>,
    step: usize,
}

fn label_map<S: Scalar>(shape: &[usize], value: f64) -> Result<Tensor<S>> {
    Tensor::full(shape, S::of(value))
}

fn batch<'a, S: Scalar>(pool: &[&'a WindowSample<S>], idx: &[usize]) -> Vec<&'a WindowSample<S>> {
    idx.iter().map(|&i| pool[i]).collect()
}

impl<S: Scalar> PadaTrainer<S> {
    /// The target stream is seeded with `seed` exactly as plain
    /// fine-tuning is; the source stream and classifier use derived seeds.
    pub fn new(model: &Stnet<S>, config: &PadaConfig, n_target: usize, n_source: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_target == 0 {
            return Err(Error::Data("adaptation needs at least one target window".into()));
        }
        Ok(Self {
            config: config.clone(),
            classifier: DomainClassifier::new(model.config().base_channels, config, seed ^ CLASSIFIER_INIT),
            model_adam: AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }),
            cls_adam: AdamState::new(AdamConfig { lr: config.classifier_lr, ..AdamConfig::default() }),
            target_sampler: BatchSampler::new(n_target, seed),
            source_sampler: (n_source > 0).then(|| BatchSampler::new(n_source, seed ^ SOURCE_STREAM)),
            step: 0,
        })
    }

    fn next_batches<'a>(
        &mut self,
        target: &[&'a WindowSample<S>],
        source: &[&'a WindowSample<S>],
    ) -> (Vec<&'a WindowSample<S>>, Vec<&'a WindowSample<S>>) {
        let t = batch(target, &self.target_sampler.next_batch(self.config.target_batch));
        let s = match &mut self.source_sampler {
            Some(sampler) if !source.is_empty() => batch(source, &sampler.next_batch(self.config.source_batch)),
            _ => Vec::new(),
        };
        (t, s)
    }

    /// Step 1: prediction MSE plus the inverted-label confusion term,
    /// applied to the STNet. Returns `(pred_loss, adv_loss, features)`;
    /// features are only kept when a source batch was given.
    pub fn model_step(
        &mut self,
        model: &mut Stnet<S>,
        target: &[&WindowSample<S>],
        source: &[&WindowSample<S>],
    ) -> Result<(f64, f64, Option<DomainFeatures<S>>)> {
        let step = self.step;
        let adversarial = self.config.adv_weight > 0.0 && !source.is_empty();
        let (xt, yt) = stack_windows(target)?;
        if source.is_empty() && !adversarial {
            let loss = stnet_step(model, &mut self.model_adam, xt, yt, step)?;
            return Ok((loss, 0.0, None));
        }
        let temporal = model.config().temporal;
        let mut tape = Tape::new();
        let (ft, fs, pred_loss) = {
            let (arch, mut cx) = model.ctx(&mut tape, true);
            let x = cx.tape.constant(xt);
            let y = cx.tape.constant(yt);
            let (ft, last) = arch.features(&mut cx, x, temporal)?;
            let pt = arch.predict(&mut cx, ft, last)?;
            let mut loss = mse(cx.tape, pt, y)?;
            let mut fs = None;
            if !source.is_empty() {
                // Running statistics follow the target domain only.
                let saved = cx.store.buffers();
                let (xs, ys) = stack_windows(source)?;
                let x = cx.tape.constant(xs);
                let y = cx.tape.constant(ys);
                let (f, last) = arch.features(&mut cx, x, temporal)?;
                let ps = arch.predict(&mut cx, f, last)?;
                cx.store.restore_buffers(&saved);
                let ls = mse(cx.tape, ps, y)?;
                let (nt, ns) = (target.len() as f64, source.len() as f64);
                let a = cx.tape.scale(loss, S::of(nt / (nt + ns)))?;
                let b = cx.tape.scale(ls, S::of(ns / (nt + ns)))?;
                loss = cx.tape.add(a, b)?;
                fs = Some(f);
            }
            (ft, fs, loss)
        };
        let mut total = pred_loss;
        let mut adv_value = 0.0;
        if adversarial {
            let fs = fs.expect("source batch present");
            let pt = self.classifier.forward(&mut tape, ft)?;
            let ps = self.classifier.forward(&mut tape, fs)?;
            let shape_t = tape.shape(pt).to_vec();
            let shape_s = tape.shape(ps).to_vec();
            let inv_t = tape.constant(label_map(&shape_t, 0.0)?);
            let inv_s = tape.constant(label_map(&shape_s, 1.0)?);
            let a = bce(&mut tape, pt, inv_t)?;
            let b = bce(&mut tape, ps, inv_s)?;
            let sum = tape.add(a, b)?;
            let adv = tape.scale(sum, S::of(0.5))?;
            adv_value = tape.value(adv).data()[0].as_f64();
            let weighted = tape.scale(adv, S::of(self.config.adv_weight))?;
            total = tape.add(pred_loss, weighted)?;
        }
        let pred_value = tape.value(pred_loss).data()[0].as_f64();
        let total_value = tape.value(total).data()[0].as_f64();
        if !total_value.is_finite() {
            return Err(Error::Train { stage: "pada".into(), detail: format!("loss {total_value} at step {step}") });
        }
        tape.backward_into(total, &mut model.store)?;
        self.model_adam.step_store(&mut model.store)?;
        let features = DomainFeatures { target: tape.value(ft).clone(), source: fs.map(|f| tape.value(f).clone()) };
        Ok((pred_value, adv_value, Some(features)))
    }

    /// Fusion features of stacked windows without touching the model's
    /// parameters or statistics when `training` is false.
    pub fn features_of(&self, model: &mut Stnet<S>, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        let temporal = model.config().temporal;
        let mut tape = Tape::new();
        let (arch, mut cx) = model.ctx(&mut tape, training);
        let xv = cx.tape.constant(x.clone());
        let (f, _) = arch.features(&mut cx, xv, temporal)?;
        Ok(cx.tape.value(f).clone())
    }

    /// Step 2: classifier BCE with true labels on detached features.
    /// Returns `(loss, pixel accuracy)`; without source features the
    /// classifier is left untouched.
    pub fn classifier_step(&mut self, features: &DomainFeatures<S>) -> Result<(f64, f64)> {
        let Some(source) = &features.source else {
            return Ok((0.0, 0.0));
        };
        let mut tape = Tape::new();
        let ft = tape.constant(features.target.clone());
        let fs = tape.constant(source.clone());
        let pt = self.classifier.forward(&mut tape, ft)?;
        let ps = self.classifier.forward(&mut tape, fs)?;
        let lt = tape.constant(label_map(tape.shape(pt), 1.0)?);
        let ls = tape.constant(label_map(tape.shape(ps), 0.0)?);
        let a = bce(&mut tape, pt, lt)?;
        let b = bce(&mut tape, ps, ls)?;
        let sum = tape.add(a, b)?;
        let loss = tape.scale(sum, S::of(0.5))?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Train { stage: "pada classifier".into(), detail: format!("loss {value}") });
        }
        let half = S::of(0.5);
        let hits_t = tape.value(pt).data().iter().filter(|&&p| p > half).count();
        let hits_s = tape.value(ps).data().iter().filter(|&&p| p < half).count();
        let (nt, ns) = (tape.value(pt).numel(), tape.value(ps).numel());
        let accuracy = 0.5 * (hits_t as f64 / nt as f64 + hits_s as f64 / ns as f64);
        tape.backward_into(loss, &mut self.classifier.store)?;
        self.cls_adam.step_store(&mut self.classifier.store)?;
        Ok((value, accuracy))
    }

    /// One full adaptation step.
    pub fn step(
        &mut self,
        model: &mut Stnet<S>,
        target: &[&WindowSample<S>],
        source: &[&WindowSample<S>],
    ) -> Result<PadaStepLog> {
        let (tb, sb) = self.next_batches(target, source);
        let (pred_loss, adv_loss, feats) = self.model_step(model, &tb, &sb)?;
        let (cls_loss, cls_accuracy) = match &feats {
            Some(f) => self.classifier_step(f)?,
            None => (0.0, 0.0),
        };
        self.step += 1;
        Ok(PadaStepLog { pred_loss, adv_loss, cls_loss, cls_accuracy })
    }

    /// A classifier-only step with the extractor frozen (evaluation-mode
    /// features, no model update).
    pub fn frozen_step(
        &mut self,
        model: &mut Stnet<S>,
        target: &[&WindowSample<S>],
        source: &[&WindowSample<S>],
    ) -> Result<(f64, f64)> {
        let (tb, sb) = self.next_batches(target, source);
        let (xt, _) = stack_windows(&tb)?;
        let ft = self.features_of(model, &xt, false)?;
        let fs = if sb.is_empty() {
            None
        } else {
            let (xs, _) = stack_windows(&sb)?;
            Some(self.features_of(model, &xs, false)?)
        };
        self.classifier_step(&DomainFeatures { target: ft, source: fs })
    }
}

/// Runs `config.steps` adaptation steps on `model`.
pub fn pada_finetune<S: Scalar>(
    model: &mut Stnet<S>,
    source: &[&WindowSample<S>],
    target: &[&WindowSample<S>],
    config: &PadaConfig,
    seed: u64,
) -> Result<PadaLog> {
    let mut trainer = PadaTrainer::new(model, config, target.len(), source.len(), seed)?;
    let mut log = PadaLog::default();
    for _ in 0..config.steps {
        log.steps.push(trainer.step(model, target, source)?);
    }
    Ok(log)
}
