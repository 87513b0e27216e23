//! Cross-domain short-text classification.
//!
//! A convolutional text encoder shared by three heads: a supervised
//! classifier, a graph-context predictor trained with negative sampling over
//! a k-nearest-neighbour similarity graph, and a domain discriminator trained
//! through gradient reversal.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
