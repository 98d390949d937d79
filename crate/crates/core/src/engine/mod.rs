//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{
    grad_check, grad_check_with, relative_error, Coordinates, FD_STEP, RELATIVE_FLOOR,
};
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, MASK_SENTINEL};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index error in {op}: id {id} at position {position} is outside [0, {bound})")]
    Index {
        op: &'static str,
        position: usize,
        id: usize,
        bound: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}
