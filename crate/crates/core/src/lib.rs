//! Mixture-of-experts Prompt decision transformer with staged training,
//! gradient-conflict diagnostics and a synthetic multi-task control suite.

pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod conflict;
pub mod datastore;
pub mod error;
pub mod metrics;
pub mod eval;
pub mod model;
pub mod moe;
pub mod numfmt;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
