//! In-context-learning MIMO equalization.
//!
//! A decoder-only transformer is pre-trained across random fading tasks to
//! map a pilot context plus a received vector to a soft estimate of the
//! transmitted 4-QAM vector. Exact Bayesian equalizers under the quantized
//! receiver model serve as references.

pub mod channel;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod numerics;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
