pub mod augment;
pub mod cli;
pub mod error;
pub mod features;
pub mod frame;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use error::{FrtmError, Result};
