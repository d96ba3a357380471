//! Confounder-aware saliency maps for small ConvNets.
//!
//! The pipeline trains an encoder/predictor ConvNet, tests every encoder
//! feature for association with known confounders using a per-feature
//! linear model, and then back-propagates the prediction score only
//! through the features that passed the test.

pub mod autodiff;
pub mod cli;
pub mod convnet;
pub mod error;
mod floats;
pub mod glm;
pub mod saliency;
pub mod seed;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
