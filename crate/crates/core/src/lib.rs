pub mod checkpoint;
pub mod config;
mod conv;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{GradTape, Shape, Tensor};
