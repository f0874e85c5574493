pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod seed;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
