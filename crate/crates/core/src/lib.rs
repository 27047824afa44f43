pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod params;
pub mod primitives;
pub mod rng;
pub mod search;
pub mod search_space;
pub mod supernet;
pub mod train;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
