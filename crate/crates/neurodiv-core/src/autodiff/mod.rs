//! Reverse-mode automatic differentiation on dense tensors.
//!
//! Graphs are built once (define-then-run), evaluated against named input
//! bindings, and differentiated by a single reverse sweep in reverse
//! topological order. Node ids are indices into the build order, so the
//! build order is already topological. All numerics are generic over
//! [`Real`] (f32 or f64); every kernel uses a fixed summation order, so
//! results are bit-reproducible for a given precision regardless of
//! thread count.

pub mod fdcheck;
mod graph;
mod kernels;
mod tensor;

pub use fdcheck::{finite_difference_check, FdReport};
pub use graph::{Bindings, Evaluation, Gradients, Graph, GraphBuilder, NodeId};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Floating point width of a tensor element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    Double,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Single => write!(f, "single"),
            Precision::Double => write!(f, "double"),
        }
    }
}

/// Element scalar for tensors. Implemented for f32 and f64 only; code is
/// monomorphized so the precision switch costs nothing at run time.
pub trait Real:
    Copy
    + Send
    + Sync
    + 'static
    + PartialEq
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    const PRECISION: Precision;
    /// Bytes per element in the serialized little-endian layout.
    const WIDTH: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn write_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_bytes(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const PRECISION: Precision = Precision::Single;
    const WIDTH: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn powf(self, e: Self) -> Self {
        f32::powf(self, e)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes per f32"))
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const PRECISION: Precision = Precision::Double;
    const WIDTH: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powf(self, e: Self) -> Self {
        f64::powf(self, e)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes per f64"))
    }
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("tensor data length {len} does not match shape {shape:?}")]
    TensorShape { len: usize, shape: Vec<usize> },
    #[error("node {node} ({op}): {msg}")]
    Shape { node: NodeId, op: &'static str, msg: String },
    #[error("node id {0} out of range")]
    BadNode(NodeId),
    #[error("duplicate input name '{0}'")]
    DuplicateInput(String),
    #[error("missing binding for input '{0}'")]
    MissingBinding(String),
    #[error("binding '{0}' does not correspond to any graph input")]
    UnknownBinding(String),
    #[error("input '{name}' expects shape {expected:?}, got {got:?}")]
    BindingShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("loss node must be a scalar, has shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gather index {index} out of range for table with {rows} rows")]
    GatherIndex { index: i64, rows: usize },
    #[error("gradient requested through non-differentiable operand of node {node} ({op})")]
    NonDifferentiable { node: NodeId, op: &'static str },
    #[error("unknown output '{0}'")]
    UnknownOutput(String),
    #[error("finite-difference check requires double precision")]
    DoublePrecisionRequired,
}
