pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck_suite;
pub mod losses;
pub mod network;
pub mod optimizer;
pub mod sampling;
pub mod seed;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use task::{RegionSpec, Task};
