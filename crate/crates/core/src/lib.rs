pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod probhead;
pub mod real;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
pub use real::Real;
