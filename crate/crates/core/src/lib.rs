//! Divide-and-co-train toolkit.
//!
//! One large network description is split into `S` narrower members, the
//! members are co-trained on different augmented views of the same batches
//! with a Jensen-Shannon consistency term, and their outputs are combined
//! into an ensemble. Cost modelling and a sequential-vs-concurrent inference
//! benchmark round out the pipeline.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pin the common instantiations.

pub mod archspec;
pub mod cli;
pub mod cotrain;
pub mod datagen;
pub mod divider;
pub mod ensemble;
mod error;
pub mod numerics;
pub mod parallel;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit tensor, used by every gradient check.
pub type Tensor64 = numerics::Tensor<f64>;
/// 32-bit tensor, used when the precision flag asks for speed.
pub type Tensor32 = numerics::Tensor<f32>;
pub type MemberModel64 = numerics::MemberModel<f64>;
pub type MemberModel32 = numerics::MemberModel<f32>;
pub type ProbBatch64 = cotrain::ProbBatch<f64>;
pub type ProbBatch32 = cotrain::ProbBatch<f32>;
