//! Windowed attention with a rank-factorized implicit positional bias,
//! computed by a streaming online-softmax kernel.

pub mod attention;
pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod instrument;
pub mod posbias;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
