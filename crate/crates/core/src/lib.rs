//! Gated Kalman-style sequence memory: test-time ridge regression over a gated
//! key covariance, solved per token with a fixed-budget Chebyshev iteration.

mod error;
pub mod kf;
pub mod layer;
pub mod numerics;
pub mod solvers;

pub use error::{GkaError, Result};
