pub mod error;
pub mod explain;
pub mod complexity;
pub mod data;
pub mod graph;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
