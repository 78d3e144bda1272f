//! Dense tensors, a reverse-mode tape, parameter storage, optimisation and
//! finite-difference gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, ParamGradReport};
pub use graph::{dropout_mask, DropoutKey, Gradients, Graph, Var, LAYERNORM_EPS, MASK_BIAS};
pub use optim::AdamW;
pub use params::{Param, ParamGroup, ParamStore};
pub use tensor::Tensor;
