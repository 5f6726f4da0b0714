use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm2d, Conv2d, Ctx};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Two 5×5 convolutions, each followed by ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureUnit {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl FeatureUnit {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 5, 1, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 5, 1, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = cx.tape.relu(y)?;
        let y = self.conv2.forward(cx, y)?;
        cx.tape.relu(y)
    }
}

/// Densely connected conv-block: concat(inputs) → 3×3 conv → BN → ReLU →
/// 3×3 conv → ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseBlock {
    pub conv1: Conv2d,
    pub norm: BatchNorm2d,
    pub conv2: Conv2d,
}

impl DenseBlock {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, c_in: usize, width: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, width, 3, 1, rng),
            norm: BatchNorm2d::new(store, &format!("{name}.bn"), width),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), width, width, 3, 1, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.conv2.c_out
    }

    /// `inputs` are concatenated on the channel axis. They may cover only a
    /// leading subset of the configured input channels, in which case the
    /// first convolution uses the matching weight slice.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, inputs: &[Var]) -> Result<Var> {
        let x = if inputs.len() == 1 { inputs[0] } else { cx.tape.concat(inputs, 1)? };
        let channels = cx.tape.shape(x)[1];
        if channels > self.conv1.c_in {
            return Err(Error::shape(format!(
                "dense block takes at most {} channels, got {channels}",
                self.conv1.c_in
            )));
        }
        let y = self.conv1.forward_leading(cx, x, channels)?;
        let y = self.norm.forward(cx, y)?;
        let y = cx.tape.relu(y)?;
        let y = self.conv2.forward(cx, y)?;
        cx.tape.relu(y)
    }
}

/// 3×3 conv (C → 4C) → BN → pixel shuffle ×2 → ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UpsampleUnit {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

impl UpsampleUnit {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), channels, 4 * channels, 3, 1, rng),
            norm: BatchNorm2d::new(store, &format!("{name}.bn"), 4 * channels),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.norm.forward(cx, y)?;
        let y = cx.tape.pixel_shuffle(y, 2)?;
        cx.tape.relu(y)
    }
}

/// Residual block of two 3×3 convolutions. A stride > 1 applies to the
/// first convolution, and the skip path keeps every `stride`-th pixel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub stride: usize,
}

impl ResBlock {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, channels: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, stride, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, rng),
            stride,
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = cx.tape.relu(y)?;
        let y = self.conv2.forward(cx, y)?;
        let skip = cx.tape.subsample(x, self.stride)?;
        let y = cx.tape.add(skip, y)?;
        cx.tape.relu(y)
    }
}
