//! The spatial-temporal super-resolution network.
//!
//! A spatial backbone refines the last coarse frame through a preliminary
//! feature unit, `L` densely connected conv-blocks, a 1×1 fusion conv and
//! `log2(n)` pixel-shuffle upsampling units, then redistributes each coarse
//! cell over its sub-cells with [`n2_normalize`]. The temporal branch
//! merges the window into `L` frames with a strided 3-D convolution and
//! runs each frame through one shared feature unit; feature `i` is
//! concatenated onto the input of block `i`.
//!
//! The output of the fusion conv is the boundary between the feature
//! extractor and the predictor used by adversarial adaptation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::nn::{n2_normalize, Conv2d, Conv3dTemporal, Ctx, DenseBlock, FeatureUnit, UpsampleUnit};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added to the per-sample input scale so an all-zero window stays finite.
pub const INPUT_SCALE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StnetConfig {
    /// Window length `T`.
    pub seq_len: usize,
    /// Temporal merge stride `T_S`; the network has `T / T_S` blocks.
    pub time_stride: usize,
    /// Base channels `C_B`.
    pub base_channels: usize,
    /// Channels of the merged temporal frames `C_T`.
    pub time_channels: usize,
    /// Output channels of every dense block.
    pub block_width: usize,
    /// Upscale factor `n`, a power of two.
    pub upscale: usize,
    /// When false the temporal branch is skipped (the spatial-only variant).
    pub temporal: bool,
}

impl Default for StnetConfig {
    fn default() -> Self {
        Self::desk(4)
    }
}

impl StnetConfig {
    pub fn desk(upscale: usize) -> Self {
        Self { seq_len: 24, time_stride: 6, base_channels: 16, time_channels: 16, block_width: 16, upscale, temporal: true }
    }

    pub fn paper(upscale: usize) -> Self {
        Self { seq_len: 48, time_stride: 6, base_channels: 64, time_channels: 16, block_width: 64, upscale, temporal: true }
    }

    pub fn blocks(&self) -> usize {
        self.seq_len / self.time_stride
    }

    pub fn upsample_stages(&self) -> usize {
        self.upscale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.time_stride == 0 || self.seq_len == 0 || !self.seq_len.is_multiple_of(self.time_stride) {
            return fail(format!("window {} is not a multiple of the stride {}", self.seq_len, self.time_stride));
        }
        if !self.upscale.is_power_of_two() || self.upscale < 2 {
            return fail(format!("upscale {} must be a power of two ≥ 2", self.upscale));
        }
        if self.base_channels == 0 || self.time_channels == 0 || self.block_width == 0 {
            return fail("channel counts must be positive".into());
        }
        Ok(())
    }
}

/// Layer handles into a model's [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StnetArch {
    pub prelim: FeatureUnit,
    pub tnet_merge: Conv3dTemporal,
    pub tnet_unit: FeatureUnit,
    pub blocks: Vec<DenseBlock>,
    pub fusion: Conv2d,
    pub upsample: Vec<UpsampleUnit>,
    pub head: Conv2d,
    pub config: StnetConfig,
}

impl StnetArch {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: &StnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cb, ct, width, l) = (config.base_channels, config.time_channels, config.block_width, config.blocks());
        let prelim = FeatureUnit::new(store, "snet.prelim", 1, cb, &mut rng);
        let tnet_merge = Conv3dTemporal::new(store, "tnet.merge", 1, ct, config.time_stride, 3, &mut rng);
        let tnet_unit = FeatureUnit::new(store, "tnet.unit", ct, cb, &mut rng);
        let blocks = (0..l)
            .map(|i| DenseBlock::new(store, &format!("snet.block{i}"), cb + i * width + cb, width, &mut rng))
            .collect();
        let fusion = Conv2d::new(store, "snet.fusion", cb + l * width, cb, 1, 1, &mut rng);
        let upsample = (0..config.upsample_stages())
            .map(|i| UpsampleUnit::new(store, &format!("snet.up{i}"), cb, &mut rng))
            .collect();
        let head = Conv2d::new(store, "snet.head", cb, 1, 3, 1, &mut rng);
        // start from a near-uniform split of each coarse cell
        store.get_mut(head.bias).data_mut().fill(S::one());
        Ok(Self { prelim, tnet_merge, tnet_unit, blocks, fusion, upsample, head, config: config.clone() })
    }

    fn check_input<S: Scalar>(&self, tape: &Tape<S>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.config.seq_len {
            return Err(Error::shape(format!(
                "expected [B, {}, H, W] coarse windows, got {s:?}",
                self.config.seq_len
            )));
        }
        Ok(())
    }

    /// Divides each sample by the mean of its last frame, so the network
    /// sees scale-free inputs. Returns the scaled window and the raw last
    /// frame `[B, 1, H, W]`.
    pub fn normalize_input<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<(Var, Var)> {
        self.check_input(cx.tape, x)?;
        let s = cx.tape.shape(x).to_vec();
        let last = cx.tape.narrow(x, 1, s[1] - 1, 1)?;
        let total = cx.tape.reduce_sum(last, &[1, 2, 3], true)?;
        let mean = cx.tape.scale(total, S::of(1.0 / (s[2] * s[3]) as f64))?;
        let denom = cx.tape.add_scalar(mean, S::of(INPUT_SCALE_EPS))?;
        let scaled = cx.tape.div(x, denom)?;
        Ok((scaled, last))
    }

    /// Temporal features of a scaled window `[B, T, H, W]`, earliest first,
    /// each `[B, C_B, H, W]`.
    pub fn tnet_features<S: Scalar>(&self, cx: &mut Ctx<S>, scaled: Var) -> Result<Vec<Var>> {
        self.check_input(cx.tape, scaled)?;
        let s = cx.tape.shape(scaled).to_vec();
        let x5 = cx.tape.reshape(scaled, &[s[0], 1, s[1], s[2], s[3]])?;
        let merged = self.tnet_merge.forward(cx, x5)?;
        let merged = cx.tape.relu(merged)?;
        (0..self.config.blocks())
            .map(|l| {
                let frame = cx.tape.select(merged, 2, l)?;
                self.tnet_unit.forward(cx, frame)
            })
            .collect()
    }

    /// Fusion-conv output `[B, C_B, H, W]` and the raw last coarse frame.
    pub fn features<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var, temporal: bool) -> Result<(Var, Var)> {
        let (scaled, last_raw) = self.normalize_input(cx, x)?;
        let t = cx.tape.shape(scaled)[1];
        let last = cx.tape.narrow(scaled, 1, t - 1, 1)?;
        let temporal_feats = if temporal { self.tnet_features(cx, scaled)? } else { Vec::new() };
        let mut outs = vec![self.prelim.forward(cx, last)?];
        for (i, block) in self.blocks.iter().enumerate() {
            let mut inputs = outs.clone();
            inputs.extend(temporal_feats.get(i).copied());
            outs.push(block.forward(cx, &inputs)?);
        }
        let all = cx.tape.concat(&outs, 1)?;
        Ok((self.fusion.forward(cx, all)?, last_raw))
    }

    /// Upsampling, head and N² normalization against `last_raw`.
    pub fn predict<S: Scalar>(&self, cx: &mut Ctx<S>, features: Var, last_raw: Var) -> Result<Var> {
        let mut y = features;
        for unit in &self.upsample {
            y = unit.forward(cx, y)?;
        }
        let raw = self.head.forward(cx, y)?;
        n2_normalize(cx.tape, raw, last_raw, self.config.upscale)
    }
}

/// An STNet with its own parameters.
#[derive(Clone, Debug)]
pub struct Stnet<S: Scalar = f64> {
    pub arch: StnetArch,
    pub store: ParamStore<S>,
    pub seed: u64,
}

impl<S: Scalar> Stnet<S> {
    pub fn new(config: &StnetConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = StnetArch::new(&mut store, config, seed)?;
        Ok(Self { arch, store, seed })
    }

    pub fn config(&self) -> &StnetConfig {
        &self.arch.config
    }

    pub fn ctx<'a>(&'a mut self, tape: &'a mut Tape<S>, training: bool) -> (&'a StnetArch, Ctx<'a, S>) {
        (&self.arch, Ctx::new(tape, &mut self.store, training))
    }

    /// `x[B, T, H, W] → [B, 1, nH, nW]`, using the configured mode.
    pub fn forward(&mut self, tape: &mut Tape<S>, x: Var, training: bool) -> Result<Var> {
        let temporal = self.arch.config.temporal;
        self.forward_mode(tape, x, training, temporal)
    }

    pub fn forward_mode(&mut self, tape: &mut Tape<S>, x: Var, training: bool, temporal: bool) -> Result<Var> {
        Ok(self.forward_with_features(tape, x, training, temporal)?.0)
    }

    /// Output and the fused feature map it was predicted from.
    pub fn forward_with_features(
        &mut self,
        tape: &mut Tape<S>,
        x: Var,
        training: bool,
        temporal: bool,
    ) -> Result<(Var, Var)> {
        let (arch, mut cx) = self.ctx(tape, training);
        let (feats, last) = arch.features(&mut cx, x, temporal)?;
        Ok((arch.predict(&mut cx, feats, last)?, feats))
    }

    /// Spatial-only forward on the last frames `[B, 1, H, W]` alone.
    pub fn snet_forward(&mut self, tape: &mut Tape<S>, coarse_last: Var, training: bool) -> Result<Var> {
        let s = tape.shape(coarse_last).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape(format!("expected [B, 1, H, W], got {s:?}")));
        }
        // the temporal branch is skipped, so earlier frames are never read
        let t = self.arch.config.seq_len;
        let window = tape.concat(&vec![coarse_last; t], 1)?;
        self.forward_mode(tape, window, training, false)
    }

    /// Evaluation-mode inference on concrete windows.
    pub fn infer(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = self.forward(&mut tape, v, false)?;
        Ok(tape.value(out).clone())
    }

    /// Zeros the weight slices through which temporal features enter the
    /// dense blocks.
    pub fn zero_temporal_merges(&mut self) {
        let cb = self.arch.config.base_channels;
        for block in &self.arch.blocks {
            let conv = &block.conv1;
            let (c_out, c_in, kk) = (conv.c_out, conv.c_in, conv.k * conv.k);
            let w = self.store.get_mut(conv.weight).data_mut();
            for o in 0..c_out {
                for c in c_in - cb..c_in {
                    w[(o * c_in + c) * kk..(o * c_in + c + 1) * kk].fill(S::zero());
                }
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint<S>> {
        Ok(ModelCheckpoint::new("stnet", serde_json::to_value(&self.arch.config)?, self.seed, self.store.clone()))
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint<S>) -> Result<Self> {
        ckpt.expect_kind("stnet")?;
        let config: StnetConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(&config, ckpt.seed)?;
        model.store.load_values(&ckpt.params)?;
        Ok(model)
    }
}
