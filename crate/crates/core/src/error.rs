//! Crate-wide error type.

use std::fmt;

/// Errors produced anywhere in the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A forward operation produced a non-finite value from finite inputs.
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor that is not a scalar.
    NotScalar { shape: Vec<usize> },
    /// An axis argument is out of range for the operand rank.
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    /// Tensors from two different tapes were combined.
    TapeMismatch,
    /// A weight-norm direction column has collapsed below the representable
    /// threshold and its gradient is undefined.
    DegenerateColumn { index: usize, norm: f64 },
    /// Architecture string failed to parse.
    ArchParse { pos: usize, msg: String },
    /// An architecture with the wrong terminal layer was supplied.
    WrongTerminal { expected: &'static str, found: &'static str },
    /// A distribution parameter is invalid (e.g. non-positive variance).
    InvalidDistribution { msg: String },
    /// Objective or SVI configuration violates an invariant.
    InvalidConfig { msg: String },
    /// A gradient contained NaN; the offending parameter is named.
    NonFiniteGrad { param: String },
    /// The learning-rate schedule was queried past the final iteration.
    ScheduleOutOfRange { t: usize, total: usize },
    /// A dataset split needed by an operation is empty.
    EmptySplit { split: &'static str },
    /// Training loss became non-finite.  Carries the iteration at which the
    /// divergence was detected; the caller retains the partial history.
    Diverged { iter: usize, msg: String },
    /// IDX file parse failure at a byte offset.
    Idx { offset: u64, msg: String },
    /// Input values outside the domain required by an operation.
    OutOfRange { op: &'static str, msg: String },
    /// A brute-force grid minimizer landed on the grid boundary.
    GridBoundary { dim: usize },
    /// All candidate densities underflowed to zero.
    DensityUnderflow,
    /// Generic I/O failure, carried as text so the error stays `Clone`.
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::NonFinite { op } => {
                write!(f, "{op}: produced a non-finite value (overflow)")
            }
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            Error::TapeMismatch => write!(f, "operands belong to different tapes"),
            Error::DegenerateColumn { index, norm } => {
                write!(f, "weight-norm column {index} is degenerate (norm {norm:.3e})")
            }
            Error::ArchParse { pos, msg } => {
                write!(f, "architecture parse error at position {pos}: {msg}")
            }
            Error::WrongTerminal { expected, found } => {
                write!(f, "expected {expected}-terminal architecture, found {found}-terminal")
            }
            Error::InvalidDistribution { msg } => write!(f, "invalid distribution: {msg}"),
            Error::InvalidConfig { msg } => write!(f, "invalid configuration: {msg}"),
            Error::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
            Error::ScheduleOutOfRange { t, total } => {
                write!(f, "schedule queried at t={t} but total iterations is {total}")
            }
            Error::EmptySplit { split } => write!(f, "dataset split `{split}` is empty"),
            Error::Diverged { iter, msg } => {
                write!(f, "training diverged at iteration {iter}: {msg}")
            }
            Error::Idx { offset, msg } => {
                write!(f, "IDX parse error at byte {offset}: {msg}")
            }
            Error::OutOfRange { op, msg } => write!(f, "{op}: {msg}"),
            Error::GridBoundary { dim } => {
                write!(f, "grid minimizer on boundary of dimension {dim}; enlarge the grid")
            }
            Error::DensityUnderflow => write!(f, "all candidate densities underflowed"),
            Error::Io { path, msg } => write!(f, "{path}: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
