pub mod agent;
pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod hafed;
pub mod metrics;
pub mod tensor;
pub mod tsu;

pub use error::{Error, Result};
