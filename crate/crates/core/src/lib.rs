//! Symbolic autoencoding.
//!
//! Two autoregressive sequence transducers, `X -> Z` and `Z -> X`, are coupled
//! through discrete bottlenecks so that unparallel data can train both of
//! them end-to-end through a reconstruction loss, alongside the usual
//! supervised loss on whatever parallel data exists.

pub mod batch;
pub mod bottleneck;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;
pub mod transducer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
