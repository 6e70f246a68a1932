//! Replay-buffer strategies for self-supervised learning on streaming data.
//!
//! * [`streams`]: seedable synthetic sources (IID, Markov-correlated, video
//!   segments, looped walks, non-stationary class partitions).
//! * [`buffer`]: bounded replay buffer with FIFO and minimum-redundancy
//!   eviction.
//! * [`analytics`]: correlation likelihoods, forgetting and open-set metrics.
//! * [`learner`]: a small SimSiam-style learner on vector data plus a linear
//!   probe.
//! * [`scheduler`]: virtual-clock training loop for conventional, buffered
//!   and epoch-based runs.

pub mod analytics;
pub mod buffer;
pub mod error;
pub mod learner;
pub mod scheduler;
pub mod streams;

pub use error::{Error, Result};
