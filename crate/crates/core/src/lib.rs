//! A miniature box-promptable segmentation model with everything needed to
//! train and evaluate it: a small reverse-mode differentiation core, a
//! synthetic multi-center dataset generator, Dice/AdamW training with layer
//! freezing, and DSC/mIoU evaluation protocols.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used for training and for gradient
//! checking.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{BoundParams, Component, ParameterStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training/evaluation precision.
pub type Real = f32;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParameterStore32 = ParameterStore<f32>;
pub type ParameterStore64 = ParameterStore<f64>;
