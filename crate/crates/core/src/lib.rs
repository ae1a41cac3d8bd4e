//! Dual-statistic channel gating for C2F-style convolutional blocks.
//!
//! The crate provides:
//!
//! * [`tensor`] and [`ops`]: a small `(B, C, H, W)` tensor with the
//!   primitives the gates need, each with an analytical backward pass;
//! * [`dso`]: channel mean / peak-to-mean statistics, the synergy operator
//!   `phi = (d + 1)(mu + 1) − 1` and the decision-space regions;
//! * [`gating`]: the sigmoid channel gate (DSG) and the softmax depth-group
//!   gate with noise and bounded temperature (MSG);
//! * [`c2f`]: the C2F block with either gate switchable;
//! * [`data`] and [`train`]: a seeded four-class synthetic task and a
//!   momentum-SGD harness around a small classifier.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). The `*64` aliases
//! below are the precision used by the tests and the CLI.

pub mod c2f;
pub mod checks;
pub mod data;
pub mod dso;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Dims, Gradients, Parameterized, Tensor4};

pub type Tensor64 = Tensor4<f64>;
pub type Tensor32 = Tensor4<f32>;
pub type ChannelStats64 = dso::ChannelStats<f64>;
pub type DsgParams64 = gating::DsgParams<f64>;
pub type MsgParams64 = gating::MsgParams<f64>;
pub type BlockParams64 = c2f::BlockParams<f64>;
pub type BlockParams32 = c2f::BlockParams<f32>;
pub type ToyModel64 = train::ToyModel<f64>;
