pub mod cli;
pub mod datagen;
pub mod error;
pub mod groundtruth;
pub mod metrics;
pub mod models;
pub mod pgm;
pub mod supervision;
pub mod tensorgrad;
pub mod trainer;

pub use error::{Error, Result};
