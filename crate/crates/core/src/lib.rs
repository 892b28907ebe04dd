//! CNN training and inference engine with two convolution kernels
//! (direct loop nest and im2col + GEMM), per-layer kernel autotuning and a
//! configurable worker pool.

pub mod autotune;
pub mod data;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
mod par;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use engine::Engine;
pub use error::{Error, Result};
pub use parallel::PerfConfig;
pub use tensor::{Scalar, Shape4, Tensor};
