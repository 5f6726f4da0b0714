//! POI-conditioned crowd-flow generation for target-domain augmentation.
//!
//! The generator embeds the slots of day preceding `t`, runs them through
//! an LSTM, and gates POI features channel-wise with the final hidden
//! state before a residual post-net predicts the flow `X[t+1] - X[t]`.
//! Flows are expressed in units of the city's mean cell population `μ` so
//! one model transfers across cities and grid resolutions. A whole-frame
//! discriminator scores `μ`-normalized fine frames.
//!
//! Synthesis accumulates generated flows forward and backward from the
//! single target reference and projects every frame onto the real target
//! coarse observation of its slot.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{merge_stores, split_store, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::grid::{coarsen, frame, frames, PoiMap, ReferenceSnapshot, WindowSample, SLOTS_PER_DAY};
use crate::nn::{bce, mse, n2_normalize, n2_project, Conv2d, Ctx, Embedding, Linear, Lstm, ResBlock};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::BatchSampler;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgnetConfig {
    /// Generator base channels `C_G`; also the LSTM hidden size.
    pub gen_channels: usize,
    pub embed_dim: usize,
    /// Slots of day fed to the LSTM, ending at `t`.
    pub lstm_context: usize,
    /// Synthesized frames `F`, reference included.
    pub frames: usize,
    /// Weight `α` of the flow MSE.
    pub alpha: f64,
    /// Weight of the generator's adversarial term.
    pub adv_weight: f64,
    pub disc_channels: usize,
    pub disc_layers: usize,
    pub disc_stride: usize,
    pub poi_categories: usize,
    /// Fine grid of the training city, needed by the discriminator head.
    pub fine_h: usize,
    pub fine_w: usize,
    /// Upscale factor used to build the coarse constraint of fake frames.
    pub upscale: usize,
}

impl Default for PgnetConfig {
    fn default() -> Self {
        Self::desk(32, 32, 4)
    }
}

impl PgnetConfig {
    pub fn desk(fine_h: usize, fine_w: usize, upscale: usize) -> Self {
        Self {
            gen_channels: 16,
            embed_dim: 16,
            lstm_context: 8,
            frames: 9,
            alpha: 1e-3,
            adv_weight: 1.0,
            disc_channels: 4,
            disc_layers: 3,
            disc_stride: 2,
            poi_categories: 14,
            fine_h,
            fine_w,
            upscale,
        }
    }

    pub fn paper(fine_h: usize, fine_w: usize, upscale: usize) -> Self {
        Self { gen_channels: 64, embed_dim: 64, disc_channels: 1, disc_stride: 4, ..Self::desk(fine_h, fine_w, upscale) }
    }

    /// Frames synthesized after and before the reference.
    pub fn split(&self) -> (usize, usize) {
        split_frames(self.frames)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.gen_channels == 0 || self.embed_dim == 0 || self.disc_channels == 0 || self.poi_categories == 0 {
            return bad("channel counts must be positive");
        }
        if self.lstm_context == 0 || self.frames == 0 || self.disc_stride == 0 {
            return bad("context, frames and stride must be positive");
        }
        if !(self.alpha >= 0.0 && self.adv_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.upscale == 0 || !self.fine_h.is_multiple_of(self.upscale) || !self.fine_w.is_multiple_of(self.upscale) {
            return bad("fine grid must be divisible by the upscale factor");
        }
        Ok(())
    }
}

/// `(ℓ_f, ℓ_b)` with `ℓ_f + ℓ_b + 1 = F`, forward taking the extra frame.
pub fn split_frames(f: usize) -> (usize, usize) {
    let rest = f.saturating_sub(1);
    (rest.div_ceil(2), rest / 2)
}

/// `Δ[t] = X[t+1] - X[t]` for a `[T, nH, nW]` series.
pub fn flow_targets<S: Scalar>(series: &Tensor<S>) -> Result<Tensor<S>> {
    let s = series.shape();
    if s.len() != 3 || s[0] < 2 {
        return Err(Error::shape(format!("flows need a [T ≥ 2, H, W] series, got {s:?}")));
    }
    let hw = s[1] * s[2];
    let d = series.data();
    let out = (0..(s[0] - 1) * hw).map(|i| d[i + hw] - d[i]).collect();
    Tensor::new(&[s[0] - 1, s[1], s[2]], out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub embed: Embedding,
    pub lstm: Lstm,
    pub pre_conv: Conv2d,
    pub pre_blocks: Vec<ResBlock>,
    pub post_blocks: Vec<ResBlock>,
    pub out_conv: Conv2d,
    pub context: usize,
}

impl GeneratorArch {
    fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &PgnetConfig, rng: &mut ChaCha8Rng) -> Self {
        let cg = cfg.gen_channels;
        Self {
            embed: Embedding::new(store, "time_embed", SLOTS_PER_DAY, cfg.embed_dim, rng),
            lstm: Lstm::new(store, "lstm", cfg.embed_dim, cg, rng),
            pre_conv: Conv2d::new(store, "pre.conv", cfg.poi_categories, cg, 5, 1, rng),
            pre_blocks: (0..2).map(|i| ResBlock::new(store, &format!("pre.res{i}"), cg, 1, rng)).collect(),
            post_blocks: (0..4).map(|i| ResBlock::new(store, &format!("post.res{i}"), cg, 1, rng)).collect(),
            out_conv: Conv2d::new(store, "post.out", cg, 1, 5, 1, rng),
            context: cfg.lstm_context,
        }
    }

    /// LSTM time code `[B, C_G]` for slots of day ending at each `t`.
    pub fn time_code<S: Scalar>(&self, cx: &mut Ctx<S>, slots: &[usize]) -> Result<Var> {
        let table = cx.param(self.embed.table);
        let mut steps = Vec::with_capacity(self.context);
        for k in 0..self.context {
            let rows = slots
                .iter()
                .map(|&t| {
                    let idx = (t % SLOTS_PER_DAY + SLOTS_PER_DAY * self.context - (self.context - 1) + k) % SLOTS_PER_DAY;
                    let row = cx.tape.select(table, 0, idx)?;
                    cx.tape.reshape(row, &[1, self.embed.dim])
                })
                .collect::<Result<Vec<_>>>()?;
            steps.push(cx.tape.concat(&rows, 0)?);
        }
        self.lstm.forward_steps(cx, &steps)
    }

    /// POI pre-net features `[1, C_G, nH, nW]`.
    pub fn poi_features<S: Scalar>(&self, cx: &mut Ctx<S>, poi: Var) -> Result<Var> {
        let y = self.pre_conv.forward(cx, poi)?;
        let mut y = cx.tape.relu(y)?;
        for b in &self.pre_blocks {
            y = b.forward(cx, y)?;
        }
        Ok(y)
    }

    /// Post-net applied to gated features.
    pub fn decode<S: Scalar>(&self, cx: &mut Ctx<S>, gated: Var) -> Result<Var> {
        let mut y = gated;
        for b in &self.post_blocks {
            y = b.forward(cx, y)?;
        }
        self.out_conv.forward(cx, y)
    }

    /// Normalized flows `[B, 1, nH, nW]` for slots `t` given POI features
    /// `[1, C, nH, nW]`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, slots: &[usize], poi: Var) -> Result<Var> {
        if slots.is_empty() {
            return Err(Error::shape("generator needs at least one slot"));
        }
        let code = self.time_code(cx, slots)?;
        let c = cx.tape.shape(code)[1];
        let code = cx.tape.reshape(code, &[slots.len(), c, 1, 1])?;
        let feats = self.poi_features(cx, poi)?;
        let gated = cx.tape.mul(code, feats)?;
        self.decode(cx, gated)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub stem: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub head: Linear,
    pub fine_h: usize,
    pub fine_w: usize,
}

impl DiscriminatorArch {
    fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &PgnetConfig, rng: &mut ChaCha8Rng) -> Self {
        let cd = cfg.disc_channels;
        let (mut h, mut w) = (cfg.fine_h, cfg.fine_w);
        for _ in 0..cfg.disc_layers {
            h = h.div_ceil(cfg.disc_stride);
            w = w.div_ceil(cfg.disc_stride);
        }
        Self {
            stem: Conv2d::new(store, "stem", 1, cd, 3, 1, rng),
            blocks: (0..cfg.disc_layers)
                .map(|i| ResBlock::new(store, &format!("res{i}"), cd, cfg.disc_stride, rng))
                .collect(),
            head: Linear::new(store, "head", cd * h * w, 1, rng),
            fine_h: cfg.fine_h,
            fine_w: cfg.fine_w,
        }
    }

    /// Probability that each frame of `x[B, 1, nH, nW]` is real, `[B]`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.fine_h || s[3] != self.fine_w {
            return Err(Error::shape(format!(
                "discriminator expects [B, 1, {}, {}], got {s:?}",
                self.fine_h, self.fine_w
            )));
        }
        let y = self.stem.forward(cx, x)?;
        let mut y = cx.tape.relu(y)?;
        for b in &self.blocks {
            y = b.forward(cx, y)?;
        }
        let flat = cx.tape.reshape(y, &[s[0], self.head.d_in])?;
        let logit = self.head.forward(cx, flat)?;
        let p = cx.tape.sigmoid(logit)?;
        cx.tape.reshape(p, &[s[0]])
    }
}

/// Per-step loss bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgnetStepLog {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_mse: f64,
    pub g_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PgnetLog {
    pub steps: Vec<PgnetStepLog>,
    /// `(step, validation flow MSE)` in raw population units.
    pub val_mse: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgnetTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub val_fraction: f64,
}

impl Default for PgnetTrainOptions {
    fn default() -> Self {
        Self { steps: 200, batch_size: 4, lr: 1e-3, eval_every: 20, val_fraction: 0.15 }
    }
}

/// Generator and discriminator with separate parameter stores.
#[derive(Clone, Debug)]
pub struct Pgnet<S: Scalar = f64> {
    pub config: PgnetConfig,
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
    pub gen_store: ParamStore<S>,
    pub disc_store: ParamStore<S>,
    pub seed: u64,
}

impl<S: Scalar> Pgnet<S> {
    pub fn new(config: &PgnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen_store = ParamStore::new();
        let generator = GeneratorArch::new(&mut gen_store, config, &mut rng);
        let mut disc_store = ParamStore::new();
        let discriminator = DiscriminatorArch::new(&mut disc_store, config, &mut rng);
        Ok(Self { config: config.clone(), generator, discriminator, gen_store, disc_store, seed })
    }

    /// Generator forward on a tape, normalized flows `[B, 1, nH, nW]`.
    pub fn generate(&mut self, tape: &mut Tape<S>, slots: &[usize], poi: Var) -> Result<Var> {
        let mut cx = Ctx::new(tape, &mut self.gen_store, true);
        self.generator.forward(&mut cx, slots, poi)
    }

    /// Discriminator forward on a tape.
    pub fn discriminate(&mut self, tape: &mut Tape<S>, frames: Var) -> Result<Var> {
        let mut cx = Ctx::new(tape, &mut self.disc_store, true);
        self.discriminator.forward(&mut cx, frames)
    }

    /// Flows in population units for each slot, each `[1, nH, nW]`.
    pub fn generate_flows(&mut self, slots: &[usize], poi: &PoiMap<S>, mean_cell: S) -> Result<Vec<Tensor<S>>> {
        if slots.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = tape.constant(poi.features());
        let out = self.generate(&mut tape, slots, p)?;
        let v = tape.value(out);
        let hw = v.shape()[2] * v.shape()[3];
        Ok((0..slots.len())
            .map(|b| {
                let data = v.data()[b * hw..(b + 1) * hw].iter().map(|&d| d * mean_cell).collect();
                Tensor::new(&[1, v.shape()[2], v.shape()[3]], data).expect("frame shape")
            })
            .collect())
    }

    /// Discriminator scores for raw frames `[B, 1, nH, nW]`.
    pub fn score_frames(&mut self, raw: &Tensor<S>, mean_cell: S) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(raw.map(|v| v / mean_cell));
        let p = self.discriminate(&mut tape, x)?;
        Ok(tape.value(p).clone())
    }

    /// Adversarial training on a fine series `[T, nH, nW]` and its POI map.
    /// The generator with the lowest validation flow MSE is kept.
    pub fn train(&mut self, series: &Tensor<S>, poi: &PoiMap<S>, opts: &PgnetTrainOptions, seed: u64) -> Result<PgnetLog> {
        let flows = flow_targets(series)?;
        let n_flows = flows.shape()[0];
        let mut order: Vec<usize> = (0..n_flows).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f10e));
        let n_val = ((n_flows as f64 * opts.val_fraction).round() as usize).min(n_flows - 1);
        let (val, train) = order.split_at(n_val);
        let (val, train) = (val.to_vec(), train.to_vec());
        let mu = series.mean();
        if mu <= S::zero() {
            return Err(Error::Data("series has no population".into()));
        }
        let inv_mu = S::one() / mu;
        let n = self.config.upscale;
        let next_coarse = coarsen(&frames(series, 1, n_flows), n)?;
        let poi_feats = poi.features();
        let cfg = AdamConfig { lr: opts.lr, ..AdamConfig::default() };
        let (mut g_adam, mut d_adam) = (AdamState::new(cfg), AdamState::new(cfg));
        let mut sampler = BatchSampler::new(train.len(), seed);
        let mut log = PgnetLog::default();
        let mut best: Option<ParamStore<S>> = None;
        let stack = |src: &Tensor<S>, idx: &[usize], scale: S| -> Result<Tensor<S>> {
            let s = src.shape();
            let hw = s[1] * s[2];
            let data = idx.iter().flat_map(|&t| src.data()[t * hw..(t + 1) * hw].iter().map(move |&v| v * scale)).collect();
            Tensor::new(&[idx.len(), 1, s[1], s[2]], data)
        };
        for step in 0..opts.steps {
            let slots: Vec<usize> = sampler.next_batch(opts.batch_size).into_iter().map(|i| train[i]).collect();
            let current = stack(series, &slots, inv_mu)?;
            let real_next: Vec<usize> = slots.iter().map(|t| t + 1).collect();
            let real = stack(series, &real_next, inv_mu)?;
            let target = stack(&flows, &slots, inv_mu)?;
            let coarse_next = stack(&next_coarse, &slots, inv_mu)?;

            let mut tape = Tape::new();
            let poi_v = tape.constant(poi_feats.clone());
            let dhat = self.generate(&mut tape, &slots, poi_v)?;
            let cur = tape.constant(current);
            let moved = tape.add(cur, dhat)?;
            let cn = tape.constant(coarse_next);
            let fake = n2_normalize(&mut tape, moved, cn, n)?;

            // discriminator update on detached frames
            let fake_value = tape.value(fake).clone();
            let d_loss = {
                let mut dt = Tape::new();
                let r = dt.constant(real);
                let f = dt.constant(fake_value);
                let pr = self.discriminate(&mut dt, r)?;
                let pf = self.discriminate(&mut dt, f)?;
                let b = slots.len();
                let ones = dt.constant(Tensor::full(&[b], S::one())?);
                let zeros = dt.constant(Tensor::zeros(&[b])?);
                let lr_ = bce(&mut dt, pr, ones)?;
                let lf = bce(&mut dt, pf, zeros)?;
                let sum = dt.add(lr_, lf)?;
                let loss = dt.scale(sum, S::of(0.5))?;
                let v = dt.value(loss).data()[0].as_f64();
                check("pgnet discriminator", step, v)?;
                dt.backward_into(loss, &mut self.disc_store)?;
                d_adam.step_store(&mut self.disc_store)?;
                v
            };

            // generator update: w·L_C + α·L_MSE, MSE in population units
            let tv = tape.constant(target);
            let mse_norm = mse(&mut tape, dhat, tv)?;
            let l_mse = tape.scale(mse_norm, mu * mu)?;
            let weighted_mse = tape.scale(l_mse, S::of(self.config.alpha))?;
            let (total, g_adv) = if self.config.adv_weight > 0.0 {
                let pf = self.discriminate(&mut tape, fake)?;
                let ones = tape.constant(Tensor::full(&[slots.len()], S::one())?);
                let l_c = bce(&mut tape, pf, ones)?;
                let weighted = tape.scale(l_c, S::of(self.config.adv_weight))?;
                (tape.add(weighted, weighted_mse)?, tape.value(l_c).data()[0].as_f64())
            } else {
                (weighted_mse, 0.0)
            };
            let g_total = tape.value(total).data()[0].as_f64();
            check("pgnet generator", step, g_total)?;
            tape.backward_into(total, &mut self.gen_store)?;
            g_adam.step_store(&mut self.gen_store)?;
            self.disc_store.clear_grads();
            log.steps.push(PgnetStepLog { d_loss, g_adv, g_mse: tape.value(l_mse).data()[0].as_f64(), g_total });

            if opts.eval_every > 0 && (step + 1) % opts.eval_every == 0 && !val.is_empty() {
                let v = self.flow_mse(&flows, &val, poi, mu)?;
                log::debug!("pgnet step {} d {d_loss:.4} g {g_total:.4} val mse {v:.4}", step + 1);
                log.val_mse.push((step + 1, v));
                if log.best_val.is_none_or(|b| v < b) {
                    log.best_val = Some(v);
                    log.best_step = step + 1;
                    best = Some(self.gen_store.clone());
                }
            }
        }
        if let Some(b) = best {
            self.gen_store.load_values(&b)?;
        }
        Ok(log)
    }

    /// Flow MSE in population units over the given flow indices.
    pub fn flow_mse(&mut self, flows: &Tensor<S>, slots: &[usize], poi: &PoiMap<S>, mean_cell: S) -> Result<f64> {
        let mut se = 0.0;
        let mut count = 0usize;
        for chunk in slots.chunks(16) {
            let gen = self.generate_flows(chunk, poi, mean_cell)?;
            for (&t, g) in chunk.iter().zip(&gen) {
                let truth = frame(flows, t);
                for (a, b) in g.data().iter().zip(truth.data()) {
                    let d = a.as_f64() - b.as_f64();
                    se += d * d;
                }
                count += g.numel();
            }
        }
        Ok(se / count.max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint<S>> {
        let params = merge_stores(&[("generator", &self.gen_store), ("discriminator", &self.disc_store)]);
        Ok(ModelCheckpoint::new("pgnet", serde_json::to_value(&self.config)?, self.seed, params))
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint<S>) -> Result<Self> {
        ckpt.expect_kind("pgnet")?;
        let config: PgnetConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(&config, ckpt.seed)?;
        model.gen_store.load_values(&split_store(&ckpt.params, "generator"))?;
        model.disc_store.load_values(&split_store(&ckpt.params, "discriminator"))?;
        Ok(model)
    }
}

fn check(stage: &str, step: usize, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Train { stage: stage.to_string(), detail: format!("loss {v} at step {step}") });
    }
    Ok(())
}

/// Synthesizes frames around the reference, ordered by slot.
///
/// `forward[k]` is the flow out of slot `ref + k`, `backward[k]` the flow
/// into slot `ref - k` (so out of `ref - k - 1`). Frame `ref + k` is
/// `Norm(ref + Σ_{j<k} forward[j])`, frame `ref - k` is
/// `Norm(ref - Σ_{j<k} backward[j])`, where `Norm` projects onto the real
/// coarse frame `coarse[slot]` of `coarse[T, H, W]`.
pub fn synthesize_series<S: Scalar>(
    reference: &ReferenceSnapshot<S>,
    forward: &[Tensor<S>],
    backward: &[Tensor<S>],
    coarse: &Tensor<S>,
    n: usize,
) -> Result<Tensor<S>> {
    let r = reference.slot_index;
    let t_len = coarse.shape()[0];
    if backward.len() > r || r + forward.len() >= t_len {
        return Err(Error::Data(format!(
            "slots {}..={} around reference {r} are outside the {t_len}-slot coarse series",
            r as isize - backward.len() as isize,
            r + forward.len()
        )));
    }
    let fine = reference.values.shape().to_vec();
    let project = |x: &Tensor<S>, slot: usize| -> Result<Tensor<S>> {
        let raw = x.reshape(&[1, 1, fine[1], fine[2]])?;
        let c = frame(coarse, slot);
        let c = c.reshape(&[1, 1, c.shape()[1], c.shape()[2]])?;
        n2_project(&raw, &c, n)?.reshape(&fine)
    };
    let accumulate = |flows: &[Tensor<S>], sign: S| -> Result<Vec<Tensor<S>>> {
        let mut acc = reference.values.clone();
        let mut out = Vec::with_capacity(flows.len());
        for f in flows {
            if f.shape() != fine.as_slice() {
                return Err(Error::shape(format!("flow {:?} vs reference {fine:?}", f.shape())));
            }
            for (a, &d) in acc.data_mut().iter_mut().zip(f.data()) {
                *a = *a + sign * d;
            }
            out.push(acc.clone());
        }
        Ok(out)
    };
    let before = accumulate(backward, -S::one())?;
    let after = accumulate(forward, S::one())?;
    let mut data = Vec::with_capacity((before.len() + after.len() + 1) * reference.values.numel());
    for (k, x) in before.iter().enumerate().rev() {
        data.extend_from_slice(project(x, r - k - 1)?.data());
    }
    data.extend_from_slice(project(&reference.values, r)?.data());
    for (k, x) in after.iter().enumerate() {
        data.extend_from_slice(project(x, r + k + 1)?.data());
    }
    Tensor::new(&[before.len() + after.len() + 1, fine[1], fine[2]], data)
}

/// Training windows for the target domain: `F` synthesized fine frames
/// around the reference, each paired with the real coarse window ending at
/// its slot. `coarse` is the full target coarse series `[T, H, W]`.
pub fn augment_target<S: Scalar>(
    reference: &ReferenceSnapshot<S>,
    poi: &PoiMap<S>,
    coarse: &Tensor<S>,
    model: &mut Pgnet<S>,
    frames_total: usize,
    window: usize,
    n: usize,
) -> Result<Vec<WindowSample<S>>> {
    if frames_total == 0 {
        return Err(Error::Config("at least one frame is required".into()));
    }
    let (lf, lb) = split_frames(frames_total);
    let r = reference.slot_index;
    let t_len = coarse.shape()[0];
    if r < lb + window.saturating_sub(1) || r + lf >= t_len {
        return Err(Error::Data(format!(
            "reference slot {r} is too close to the series boundary for {frames_total} frames with window {window}"
        )));
    }
    let mu = coarse.mean() / S::of((n * n) as f64);
    let fwd_slots: Vec<usize> = (0..lf).map(|k| r + k).collect();
    let bwd_slots: Vec<usize> = (0..lb).map(|k| r - k - 1).collect();
    let forward = model.generate_flows(&fwd_slots, poi, mu)?;
    let backward = model.generate_flows(&bwd_slots, poi, mu)?;
    let synth = synthesize_series(reference, &forward, &backward, coarse, n)?;
    let first = r - lb;
    Ok((0..frames_total)
        .map(|k| {
            let slot = first + k;
            WindowSample {
                coarse_seq: frames(coarse, slot + 1 - window, window),
                fine_target: frame(&synth, k),
                t_of_day: slot % SLOTS_PER_DAY,
                slot,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flows_examples() {
        let x = Tensor::new(&[3, 1, 1], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(flow_targets(&x).unwrap().data(), &[2.0, -1.0]);
        let c = Tensor::full(&[4, 2, 2], 5.0).unwrap();
        assert!(flow_targets(&c).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(flow_targets(&Tensor::<f64>::zeros(&[1, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn frame_split() {
        assert_eq!(split_frames(1), (0, 0));
        assert_eq!(split_frames(4), (2, 1));
        assert_eq!(split_frames(9), (4, 4));
    }

    #[test]
    fn synthesized_order_and_constraint() {
        let fine = Tensor::from_fn(&[6, 4, 4], |i| (i % 7) as f64 + 1.0).unwrap();
        let coarse = coarsen(&fine, 2).unwrap();
        let reference = ReferenceSnapshot { values: frame(&fine, 2), slot_index: 2 };
        let flow = Tensor::full(&[1, 4, 4], 0.5).unwrap();
        let out = synthesize_series(&reference, &[flow.clone(), flow.clone()], &[flow], &coarse, 2).unwrap();
        assert_eq!(out.shape(), &[4, 4, 4]);
        for k in 0..4 {
            let pooled = coarsen(&frame(&out, k), 2).unwrap();
            assert!(crate::grid::relative_error(&pooled, &frame(&coarse, k + 1)) < 1e-12);
        }
        assert!(frame(&out, 1).max_abs_diff(&reference.values) < 1e-7);
        assert!(synthesize_series(&reference, &[], &vec![frame(&fine, 0); 3], &coarse, 2).is_err());
    }
}
