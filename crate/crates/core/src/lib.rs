mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{build_model, BlockVector, MeasurementRate, Model};
pub use tensor::Tensor;
