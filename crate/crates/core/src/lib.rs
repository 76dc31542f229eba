//! Unsupervised learning of controllable sequence synthesizers.

pub mod autodiff;
pub mod cli;
mod error;
pub mod evaluation;
pub mod nets;
pub mod objectives;
pub mod quantizer;
pub mod synthdata;
pub mod trainer;

pub use error::Error;
