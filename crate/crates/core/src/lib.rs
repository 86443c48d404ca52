pub mod cli;
pub mod error;
pub mod evaluation;
pub mod inference;
mod io_util;
pub mod models;
pub mod objective;
pub mod patching;
pub mod raster;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
