//! Reverse-mode automatic differentiation over dense rank-≤2 tensors.

mod tape;
mod tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use tape::{GradientMap, Node, Tape};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op} requires a positive argument, got {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("invalid tensor dimensions {rows}x{cols}")]
    InvalidDims { rows: usize, cols: usize },
    #[error("data of length {len} does not fit shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("index {index} out of range in {op} (extent {extent})")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op} needs at least one operand")]
    Empty { op: &'static str },
}

/// Glorot-normal weights: i.i.d. N(0, 2/(rows+cols)).
pub fn glorot_normal_init<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<Tensor, AdError> {
    if rows == 0 || cols == 0 {
        return Err(AdError::InvalidDims { rows, cols });
    }
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive standard deviation");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(rows, cols, data)
}
