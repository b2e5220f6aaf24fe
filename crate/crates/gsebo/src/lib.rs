//! GSEBO: graph structure learning where per-edge connection strengths are
//! free parameters, optimized in an outer loop by differentiating through
//! unrolled inner gradient steps on GNN weights.

pub mod autodiff;
pub mod error;
pub mod engine;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
