//! Transfer-learning benchmark toolkit: datasets and few-shot subsets,
//! layered backbones, multi-layer embeddings, linear classification,
//! experiment pipelines, footprint accounting and strategy recommendation.

pub mod backbone;
pub mod container;
pub mod error;
pub mod fne;
pub mod svm;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
