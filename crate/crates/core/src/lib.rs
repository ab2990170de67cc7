//! Few-shot semantic segmentation with global (transformer) and local
//! (convolutional) enhancement of fused query/support features.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fault;
pub mod fusion;
pub mod gradcheck;
pub mod net;
pub mod nn;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Precision, Scalar};
pub use tape::{Backward, Gradients, Graph, Var};
pub use tensor::Tensor;
