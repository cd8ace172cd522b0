pub mod ablation;
pub mod attribution;
pub mod checkpoint;
pub mod circuits;
pub mod config;
pub mod error;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod sparsify;
pub mod steering;
pub mod svv;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
