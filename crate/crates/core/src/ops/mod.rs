//! Forward and backward passes for every layer the network needs, written
//! directly against flat slices.
//!
//! Numeric contract shared by all kernels: values are stored as the generic
//! scalar `S`, every reduction accumulates in `f64`, and each output element
//! is reduced in one fixed sequential order. Parallelism only ever splits
//! work *across* output elements, never inside one, so results are
//! bit-identical for any thread count.

pub mod act;
pub mod conv;
mod dense;
pub mod fc;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod pool;

/// Whether a forward pass uses batch statistics and dropout (training) or
/// running statistics and identity dropout (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
