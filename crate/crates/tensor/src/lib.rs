//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The op set is exactly what a small residual CNN with detection and
//! segmentation heads needs: convolution, bilinear upsampling, relu, 2×2 max
//! pooling, channel-broadcast add, softmax cross-entropy, smooth-L1 and a few
//! row gathers. Everything is 64-bit and single-writer.

mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_normwise};
pub use graph::{Graph, NodeInfo, NodeRole, OpCounter, OpKind, Var};
pub use tensor::Tensor;
