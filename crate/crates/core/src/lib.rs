//! Causal failure attribution and targeted correction for modular agent pipelines.

pub mod backend;
pub mod cli;
pub mod diagnosis;
pub mod error;
pub mod par;
pub mod pipeline;
pub mod prescription;
pub mod scoring;
pub mod seed;
pub mod simulator;
pub mod stats;
pub mod text;

pub use error::{Error, Result};
