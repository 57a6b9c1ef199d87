//! Correlation-aware multi-window MLP deformable image registration.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the two precisions used in practice: `f64` for
//! gradient checks and oracles, `f32` for training runs.

pub mod autodiff;
pub mod blocks;
pub mod correlation;
pub mod cost;
pub mod config;
pub mod error;
pub mod grid;
pub mod mvd;
pub mod nn;
pub mod regnet;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod tensor;
pub mod volume;
pub mod warp;

pub use autodiff::{grad_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use grid::Grid;
pub use scalar::Real;
pub use tensor::Tensor;
pub use volume::{AffineTransform, DisplacementField, LabelMap, Volume};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;
pub type Field32 = DisplacementField<f32>;
pub type Field64 = DisplacementField<f64>;
