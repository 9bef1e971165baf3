pub mod beam;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
