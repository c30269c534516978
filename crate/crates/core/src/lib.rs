pub mod baseline;
pub mod config;
pub mod datadir;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod features;
pub mod geo;
pub mod llm;
pub mod modules;
pub mod prompt;
pub mod region;

pub use error::{Error, Result};
