pub mod cost;
pub mod data;
pub mod deploy;
pub mod error;
pub mod generator;
pub mod harness;
pub mod eval;
pub mod space;
pub mod substrate;
pub mod supernet;
pub mod train;

pub use error::{EasError, Result};
