//! Shrinking spiking neural networks.
//!
//! A multi-stage SNN runs its early stages at many timesteps and its later
//! stages at progressively fewer. Between stages a temporal transformer
//! redistributes the summed stage output over the smaller number of steps,
//! and early classifiers attached after each non-final stage add auxiliary
//! losses during training only.
//!
//! Module map:
//! - [`tensor`], [`kernels`], [`autodiff`]: dense kernels and the reverse-mode tape
//! - [`neuron`]: LIF charge / fire / soft-reset
//! - [`temporal`]: temporal transformer, stage plans, latency and overhead counts
//! - [`network`]: VGG-9 / ResNet-18 style stage assembly and forward passes
//! - [`checkpoint`]: binary parameter files
//! - [`training`]: losses, SGD, schedule, epoch loop
//! - [`eventdata`]: event streams, frame integration, synthetic data, splits

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eventdata;
pub mod kernels;
pub mod network;
pub mod neuron;
pub mod scalar;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use error::{Error, EventError, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{TemporalTensor, Tensor};
