//! Residual spatial fusion for RGB-thermal semantic segmentation.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod plg;
pub mod reparam;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
