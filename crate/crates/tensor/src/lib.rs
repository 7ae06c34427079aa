//! Dense tensors and a small reverse-mode autodiff engine.
//!
//! The engine is deliberately narrow: it provides exactly the ops the fitvid
//! video model needs (NHWC convolutions, batch normalisation, gating, LSTM
//! plumbing) with hand-written backward passes, generic over `f32`/`f64`.

pub mod element;
pub mod error;
pub mod graph;
pub mod kernels;
mod ops;
pub mod par;
pub mod tensor;

pub use element::{gemm, Element, Trans};
pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use ops::BatchNormOutput;
pub use tensor::Tensor;
