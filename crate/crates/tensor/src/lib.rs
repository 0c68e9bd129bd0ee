//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Everything is a flat row-major buffer plus a shape. A [`Graph`] records
//! each operation as it is evaluated; [`Graph::backward`] replays the record
//! in reverse. Networks hold [`ParamId`]s into a [`ParamStore`] and run inside
//! a [`Session`], which binds the store to a fresh graph for one step.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod params;
mod scalar;
mod session;

pub use error::{Result, TensorError};
pub use graph::{numel, Gradients, Graph, Mode, Var};
pub use ops::arith::DEGENERATE_NORM;
pub use ops::loss::BCE_CLAMP;
pub use ops::nn::{sigmoid, BatchMoments, BnStats};
pub use params::{BnParams, Init, ParamEntry, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use session::{ParamGrads, Session, BN_EPS, BN_MOMENTUM};
