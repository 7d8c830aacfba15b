pub mod autograd;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod predictor;
pub mod synth;
pub mod table;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
