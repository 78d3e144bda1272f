//! Accident-risk forecasting over hexagonal grids.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to double precision, which the model layers and
//! harness use throughout.

pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod headcalib;
pub mod hexgrid;
pub mod pipeline;
pub mod scalar;
pub mod spatial;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Graph64 = diffcore::Graph<f64>;
pub type ParamStore64 = diffcore::ParamStore<f64>;
pub type AdamW64 = diffcore::AdamW<f64>;
