pub mod autodiff;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rng;
pub mod stylegen;
pub mod synthworld;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
