pub mod adjusted;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod invert;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ot;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod world;

pub use error::{Error, Result};
