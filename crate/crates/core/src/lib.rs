//! Core algorithms for keypoint-guided video person re-identification.
//!
//! Everything in this crate is pure computation over in-memory data: a small
//! reverse-mode tensor engine, the shared patch encoder, the global
//! (temporal-attention) and local (TCSS + KPS) branches, the composite
//! metric-learning objective, the SGD training step, and the mAP/CMC
//! retrieval evaluator. File formats, dataset IO and the CLI live in the
//! companion `keyreid` crate.
//!
//! The crate is `no_std`-compatible (`default-features = false`); it only
//! needs `alloc`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod data;
pub mod error;
pub mod global_branch;
pub mod gradcheck;
pub mod local_branch;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pose;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::CoreError;
pub use scalar::Real;
pub use tensor::{Tape, Tensor, Var};

pub type Result<T> = core::result::Result<T, CoreError>;
