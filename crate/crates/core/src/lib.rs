//! Graph retention networks for continuous-time dynamic graphs.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod model;
pub mod perf;
pub mod retention;
pub mod tensor;
pub mod verify;
pub mod training;

pub use error::{GrnError, Result};
pub use tensor::{Matrix, RngState};
