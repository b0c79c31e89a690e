//! Dense/sparse matrix primitives and a reverse-mode tape over them.

mod dense;
pub mod ops;
mod sparse;
mod tape;

pub use dense::DenseMatrix;
pub use ops::{
    cross_entropy_soft, entropy, entropy_rows, matmul, matmul_nt, matmul_tn, relu, softmax_rows, spmm,
    SparseOperator,
};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {}x{} and {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("expected {expected} elements, got {actual}")]
    InvalidLength { expected: usize, actual: usize },
    #[error("invalid CSR structure: {0}")]
    InvalidCsr(&'static str),
    #[error("entry ({row}, {col}) outside a {}x{} matrix", shape.0, shape.1)]
    IndexOutOfRange {
        row: usize,
        col: usize,
        shape: (usize, usize),
    },
    #[error("{op}: empty row set")]
    EmptyRowSet { op: &'static str },
    #[error("{op}: no operands")]
    EmptyOperands { op: &'static str },
    #[error("{op}: row {row} outside a matrix with {rows} rows")]
    RowOutOfRange {
        op: &'static str,
        row: usize,
        rows: usize,
    },
    #[error("negative probability {value} at ({row}, {col})")]
    NegativeProbability { row: usize, col: usize, value: f64 },
    #[error("variable {index} is not on this tape")]
    UnknownVar { index: usize },
    #[error("expected a 1x1 scalar node, found {}x{}", shape.0, shape.1)]
    NotScalar { shape: (usize, usize) },
}
