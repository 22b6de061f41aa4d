pub mod adaptation;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cscl;
pub mod daam;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
#[doc(hidden)]
pub mod testing;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
