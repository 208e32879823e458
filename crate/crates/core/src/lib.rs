//! Recursive latent refinement for small decoder transformers, with
//! per-iteration supervision from a ladder of teachers.

pub mod error;
pub mod eval;
pub mod hash;
pub mod model;
pub mod numerics;
pub mod retrospective;
pub mod scalar;
pub mod seed;
pub mod teachers;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type FlowModel64 = model::FlowModel<f64>;
pub type FlowModel32 = model::FlowModel<f32>;
