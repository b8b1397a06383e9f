pub mod datamodel;
pub mod encoders;
pub mod ablation;
pub mod config;
pub mod error;
pub mod evalretrieval;
pub mod gradsuite;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod params;
pub mod train;
pub mod tse;
pub mod vse;

pub use error::{Error, Result};
