//! Reverse-mode automatic differentiation on dense `f64` tensors, plus the
//! Adam optimizer and a finite-difference gradient checker.
//!
//! The design is an eager tape: [`Graph`] records every operation as it is
//! built, values are computed immediately at insertion, and
//! [`Graph::backward`] walks the tape in reverse accumulating gradients.
//! Parameters live outside the graph as [`Tensor`]s and are inserted at the
//! start of each step with [`Graph::param`]; after backward their gradients
//! are copied back out so the optimizer never touches graph internals.

mod adam;
mod gradcheck;
pub mod kernels;
mod tensor;

mod graph;

pub use adam::{adam_step, AdamParams, AdamState};
pub use gradcheck::{grad_check, op_gradient_suite, GradCheckReport};
pub use graph::{BatchNormStats, Graph, Mode, NodeId, BCE_CLAMP, BN_EPS, BN_MOMENTUM};
pub use tensor::{standard_normal, Tensor};

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    /// Operand shapes are incompatible with the operation's contract.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    /// A shape is structurally invalid (zero extent, wrong rank, or
    /// extent/data length disagreement).
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    /// A NaN or infinity appeared where the contract requires finite values.
    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },
    /// Batch statistics need at least two rows.
    #[error("batch normalization in training mode needs at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },
    /// A classification target was neither 0 nor 1.
    #[error("label at index {index} is {value}, expected exactly 0.0 or 1.0")]
    InvalidLabel { index: usize, value: f64 },
    /// Backward was called on a non-scalar node.
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    /// An embedding lookup referenced a row outside the table.
    #[error("embedding row {row} out of range: table has {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    /// The optimizer was given a parameter with no gradient buffer.
    #[error("parameter {index} has no gradient; run backward before stepping")]
    MissingGrad { index: usize },
    /// Optimizer state does not match the parameter list it was built for.
    #[error("optimizer state mismatch: {detail}")]
    StateMismatch { detail: String },
}
