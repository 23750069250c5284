pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod finetune;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod quantizer;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
