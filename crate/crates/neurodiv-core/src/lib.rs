//! Laboratory for parallel-stream language models: a small reverse-mode
//! autodiff engine, the variance-scaling theory of aggregated streams with
//! Monte Carlo certification, cross-stream diversity metrics and losses,
//! a byte-level toy transformer with per-stream adapters, training loops,
//! causal corruption experiments with hand-rolled test statistics, and a
//! FLOP cost model.

pub mod autodiff;
pub mod costmodel;
pub mod csv;
pub mod diversity;
pub mod intervention;
pub mod linalg;
pub mod model;
pub mod seeding;
pub mod stats;
pub mod theory;
pub mod training;

pub use autodiff::{
    Bindings, Evaluation, Gradients, Graph, GraphBuilder, NodeId, Precision, Real, Tensor,
};
pub use seeding::SeedTree;
