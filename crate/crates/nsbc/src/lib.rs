//! Extracts a stratified default-rule surrogate from a small CNN's last-layer
//! filter activations, names the rule predicates after segmentation concepts,
//! and retrains the network with a cosine-similarity loss that steers filters
//! away from undesired concepts and towards desired ones. A synthetic scene
//! generator with exact masks and a tunable spurious-correlation rate
//! provides ground truth for end-to-end evaluation.

pub mod autodiff;
pub mod bias;
pub mod binarize;
pub mod cli;
pub mod cnn;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fold;
pub mod fsutil;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod scenegen;
pub mod semlabel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
