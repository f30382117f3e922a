pub mod aggregator;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
