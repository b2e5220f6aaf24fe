//! Dense/sparse matrix kernels recorded on a reverse-mode tape with
//! first- and second-order differentiation support.

mod dense;
mod rng;
mod sparse;
mod tape;

pub use dense::DenseMatrix;
pub use rng::RngStream;
pub use sparse::{SparsePattern, SparseWeighted};
pub use tape::{GradientMap, NodeId, SecondOrder, Tape};
