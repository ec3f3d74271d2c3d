//! From-scratch CPU deep-learning stack for the 7-class skin-lesion pipeline:
//! dense tensors with reverse-mode autodiff, residual-bottleneck classifiers
//! and a convolutional autoencoder, dataset tooling with class-balancing
//! augmentation, deterministic training loops, and the full evaluation
//! report family (confusion matrix, per-class P/R/F1/AUC, curves, gallery).
//!
//! Everything is seeded and single-threaded by default; two runs with the
//! same config and seed produce byte-identical output trees.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod hybrid;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
