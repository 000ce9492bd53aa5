pub mod bench;
pub mod bitconv;
pub mod bitpack;
pub mod cli;
mod conv;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod quantize;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
