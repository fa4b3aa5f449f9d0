pub mod checkpoint;
pub mod cli;
pub mod combonet;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
