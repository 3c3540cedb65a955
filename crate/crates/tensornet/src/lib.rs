//! Minimal dense-tensor reverse-mode autodiff.
//!
//! Only the layers needed by small 3D convolutional autoencoders, U-Nets and
//! residual heads are provided: 3D convolution, group normalization, SiLU,
//! softplus, linear maps, embedding lookup and multi-head cross-attention,
//! plus an AdamW optimizer and a checkpoint format.
//!
//! Values are `f64`. Reductions use pairwise summation and everything runs on
//! one thread, so identical inputs give bit-identical forward and backward
//! results.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Metadata};
pub use graph::{Gradients, Graph, Var};
pub use layers::{AttentionWeights, Conv3d, Embedding, GroupNorm, Linear};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Result, Tensor, TensorError};
