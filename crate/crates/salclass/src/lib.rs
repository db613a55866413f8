//! Top-down saliency detection driven by image classification: a float64
//! tensor/autodiff core, a saliency subnetwork, a 4-channel classifier, a
//! batch-norm bridge, joint multi-loss training, fixation-data tooling and
//! saliency metrics.

pub mod checkpoint;
pub mod cli;
pub mod classifier;
pub mod data;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod train;
