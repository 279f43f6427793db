pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod mhd;
pub mod morphology;
pub mod phantom;
pub mod tensor;
pub mod training;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
