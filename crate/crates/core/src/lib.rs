//! Two-speed ensemble training for small image chips.
//!
//! Everything numeric is generic over the scalar type through [`Scalar`];
//! training normally runs in `f32` while gradient verification uses `f64`.
//! The [`Tensor32`]/[`Tensor64`] aliases cover the common cases.

pub mod data;
pub mod ensemble;
pub mod fsutil;
pub mod gradcheck;
pub mod imgio;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod saliency;
pub mod schedule;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use scalar::Scalar;
pub use tape::{Mode, Tape, Var};
pub use tensor::{Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
