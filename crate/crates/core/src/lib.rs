//! Forward models, inverse solvers, metrics and diagnostics for nanoscale
//! NV-relaxometry noise maps.

pub mod baselines;
pub mod conv;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod neural;
pub mod physics;
pub mod pipeline;
pub mod result;
pub mod scene;

pub use error::{Error, Result};

/// A 2D real-valued grid indexed `[row, col]`.
pub type ScalarField = ndarray::Array2<f64>;
