//! Compositional few-shot image classification.
//!
//! The model represents objects through a shared knowledge base: a
//! *component dictionary* of unit-norm feature vectors acting as part
//! detectors, and a *map dictionary* of prototypical spatial activation
//! patterns. Inference detects components in a convolutional feature map,
//! gates each activation map with its closest stored spatial pattern,
//! re-weights channels with a squeeze-excite gate, and classifies the
//! pooled embedding. Meta-testing freezes the embedding and fits a
//! logistic-regression head per episode.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, and a finite-difference
//!   gradient checker.
//! - [`backbone`]: residual convolutional feature extractor.
//! - [`compdict`] / [`mapdict`] / [`attention`]: the knowledge-base layers.
//! - [`heads`]: embedding assembly, the training classifier, and the
//!   episodic logistic head.
//! - [`model`]: the assembled pipeline and its parameter set.
//! - [`trainer`]: loss, SGD with momentum and cosine annealing,
//!   checkpointing.
//! - [`episodes`]: datasets, synthetic data generation, episode sampling,
//!   and episodic evaluation.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod compdict;
pub mod episodes;
pub mod error;
pub mod heads;
pub mod mapdict;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
