//! Paired-sequence transformer for voxel timeseries.
//!
//! Two self-supervised pretraining tasks (next-sequence prediction and
//! masked image reconstruction) and a supervised same-genre task, plus the
//! preprocessing, dataset construction, synthetic data and
//! cross-validation machinery around them.

pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod preprocess;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

/// Leading image dims reserved for the CLS, SEP and MSK tokens.
pub const TOKEN_DIMS: usize = 3;
