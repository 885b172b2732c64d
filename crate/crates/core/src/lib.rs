pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod growth;
pub mod imaging;
pub mod surrogate;
pub mod tmcmc;
pub mod volumes;

pub use error::{Error, Result};
