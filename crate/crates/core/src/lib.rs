//! Fine-grained population mapping from coarse grids, with one-shot
//! transfer to a data-scarce target city.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`optim`]: a small dense-tensor engine with a
//!   reverse-mode tape and Adam.
//! * [`nn`]: convolutions, batch norm, pixel shuffle, dense blocks, LSTM,
//!   losses and the N² block normalization.
//! * [`grid`], [`synth`]: population/POI grids, windows, splits, the PGRD
//!   file format, and a synthetic city generator.
//! * [`stnet`], [`pgnet`], [`pada`]: the mapping network, the flow
//!   generator used for target-domain augmentation, and adversarial
//!   fine-tuning.
//! * [`metrics`], [`experiment`]: evaluation, the bicubic baseline and the
//!   end-to-end experiment driver.
//!
//! All numeric code is generic over [`Scalar`] (`f64` by default, `f32`
//! also supported); the aliases below pin the common instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod grid;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pada;
pub mod params;
pub mod pgnet;
pub mod scalar;
pub mod stnet;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Fill, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type Stnet64 = stnet::Stnet<f64>;
pub type Stnet32 = stnet::Stnet<f32>;
pub type Pgnet64 = pgnet::Pgnet<f64>;
pub type MetricReport64 = metrics::MetricReport;
