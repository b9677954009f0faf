//! Dense tensors, GEMM-backed kernels and reverse-mode differentiation.

mod conv;
mod elementwise;
mod graph;
mod layers;
pub mod linalg;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Parameter, Var};
pub use layers::LAYER_NORM_EPS;
pub use real::Real;
pub use tensor::Tensor;

pub(crate) use conv::{col2im_add, conv1d_kernel, conv_transpose_cols};
pub(crate) use layers::{causal_attention_kernel, dense_kernel, glu_kernel, layer_norm_kernel, relu_in_place, AttnShape};

#[cfg(test)]
pub(crate) mod testing;
