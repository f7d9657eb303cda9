//! Learned conjugate-gradient detection for massive MIMO.
//!
//! The crate covers the real-valued system model ([`mimo`]), classical
//! detectors ([`detectors`]), the unfolded network with scalar or vector step
//! sizes ([`network`]), its layer-wise training ([`training`]), a learnable
//! nonuniform quantizer for the trained step sizes ([`quantizer`]), and the
//! Monte-Carlo evaluation harness ([`eval`]) with file formats in [`io`].
//!
//! All numerics are generic over [`Scalar`]; the aliases below fix `f64`.

pub mod detectors;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod mimo;
pub mod network;
pub mod quantizer;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Counted, OpTally, Scalar};

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type ComplexMatrix64 = mimo::ComplexMatrix<f64>;
pub type Sample64 = mimo::Sample<f64>;
pub type Dataset64 = mimo::Dataset<f64>;
pub type LinearSystem64 = detectors::LinearSystem<f64>;
pub type LinearSystem32 = detectors::LinearSystem<f32>;
pub type NetworkParams64 = network::NetworkParams<f64>;
pub type NetworkParams32 = network::NetworkParams<f32>;
pub type SoftQuantizerParams64 = quantizer::SoftQuantizerParams<f64>;
