//! Minimal f64 tensor engine with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: dense row-major tensors, a define-by-run
//! graph, and the handful of operators needed by audio/video generation
//! networks (2D/3D convolution, transposed convolution, pooling, batch norm,
//! pointwise math, a few reductions).
//!
//! All kernels come in a sequential and a data-parallel flavour. The
//! `parallel` feature (on by default) routes the default execution path
//! through rayon; with the feature disabled everything falls back to the
//! sequential code. Both paths assign every output element to exactly one
//! task and keep the inner accumulation order fixed, so results are
//! bit-identical regardless of the execution mode or thread count.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use graph::{Grads, Graph, Id};
pub use kernels::{ConvSpec, Exec};
pub use nn::{Mode, Sess, VarKind, VarStore};
pub use optim::Adam;
pub use tensor::Tensor;
