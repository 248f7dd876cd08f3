//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so the backward sweep is a single reverse pass.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{central_difference, gradient_check, GradCheckReport};
pub use tape::{Tape, Var, ABS_SMOOTH_DELTA};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("buffer of length {len} does not fit a {rows}x{cols} tensor")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: range {start}..{end} exceeds extent {extent}")]
    OutOfRange {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
}
