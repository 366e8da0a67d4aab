//! Compressed chunk-embedding decoding for retrieval-augmented generation at
//! desk scale: chunk encoder, projection and soft-input decoder, the
//! reconstruction + curriculum training recipe, an RL selective-compression
//! policy, and an analytical latency/memory model.

pub mod checkpoint;
pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod model;
pub mod nn;
pub mod optim;
pub mod perfmodel;
pub mod scalar;
pub mod selector;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = model::RefragModel<f32>;
pub type Model64 = model::RefragModel<f64>;
