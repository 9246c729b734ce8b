//! Energy-based concept bottleneck models.
//!
//! Inputs pass through a backbone to a latent `z`; each concept head encodes
//! `z` into a stochastic concept vector `v` and scores it against a pair of
//! codebook vectors `(q+, q-)` with a small energy network. The selected
//! codebook vectors are concatenated and fed to a linear task head.

pub mod concept_encoder;
pub mod config;
pub mod container;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod qcav;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Codebook = qcav::Codebook<f32>;
pub type Model = pipeline::Model<f32>;
pub type Model64 = pipeline::Model<f64>;
pub type PredictionRecord = pipeline::PredictionRecord<f32>;
