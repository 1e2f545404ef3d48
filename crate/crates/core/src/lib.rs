pub mod backbone;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod ops;
pub mod optim;
pub mod params;
pub mod prior;
pub mod rng;
pub mod tensorfile;
pub mod training;
pub mod video;

pub use error::{Error, Result};
