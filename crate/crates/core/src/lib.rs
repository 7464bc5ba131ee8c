pub mod checks;
pub mod error;
pub mod geometry;
pub mod network;
pub mod spa_conv;
pub mod sphermap;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
