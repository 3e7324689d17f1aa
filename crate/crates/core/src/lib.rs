//! Dense cross-layer mutual distillation.
//!
//! Two classifier networks are trained jointly from scratch. Each carries
//! auxiliary classifiers at down-sampling stages, and the two exchange soft
//! predictions between every pair of supervised layers. Deep supervision,
//! knowledge distillation and deep mutual learning are configurations of
//! the same engine.
//!
//! Modules, bottom-up:
//! - [`autograd`]: tensors, reverse-mode gradients, SGD, gradient checking
//! - [`net`]: backbone construction, auxiliary heads, parameter manifests
//! - [`distill`]: classification, deep-supervision and distillation losses
//! - [`data`]: CIFAR-10 / MNIST decoding, augmentation, batching, label noise
//! - [`trainer`]: the joint two-network training loop and checkpoints
//! - [`experiment`]: configuration, multi-seed runs, metrics and comparison

pub mod autograd;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod net;
pub mod trainer;

pub use autograd::{Float, OptimizerState, SgdConfig, Tensor};
pub use error::{ConfigIssue, Error, Result};
