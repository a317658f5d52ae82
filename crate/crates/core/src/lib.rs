//! Structural residual network for single-image rain removal.
//!
//! Everything is built from scratch on a small NCHW tensor type: dilated
//! convolutions, max pooling with exported switches and the matching
//! unpooling, residual blocks, the three-branch network itself, an SSIM loss
//! with an analytic gradient, Adam, a procedural rain generator and the file
//! formats the command-line tool reads and writes.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use metrics::{MetricReport, SsimConfig};
pub use model::{Ablation, DerainOutput, ForwardTrace, Gradients, ModelConfig, ParameterStore, Srnet};
pub use synth::{RainParams, RainSample, Regime};
pub use tensor::{Precision, RngState, Scalar, Tensor, TensorShape};
pub use train::{OptimState, Schedule, TrainConfig, TrainReport};
