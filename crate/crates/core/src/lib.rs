pub mod data;
pub mod detect;
pub mod error;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Mode, Scalar, Shape, Tape, Tensor, Var};
