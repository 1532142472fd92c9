//! Everything around the core model that touches the filesystem or the
//! operator: dataset IO, the synthetic benchmark generator, checkpoints,
//! descriptor galleries, the training driver and qualitative dumps.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dumps;
pub mod error;
pub mod gallery;
pub mod run;
pub mod synth;

pub use error::PipelineError;

pub type Result<T> = std::result::Result<T, PipelineError>;
