pub mod diffnet;
pub mod error;
pub mod prob;

pub use error::{Error, Result};
pub use prob::{softmax, ProbVector};
pub mod data;
pub mod sem;
pub mod model;
pub mod discrete;
pub mod metrics;
pub mod train;
pub mod adapt;
pub mod harness;
