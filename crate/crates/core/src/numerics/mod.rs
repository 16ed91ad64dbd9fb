//! Dense tensors, layer kernels, reverse-mode gradients and Adam.

mod adam;
pub mod kernels;
mod param;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use kernels::{
    layer_norm, matmul, multi_head_attention, softmax_rows, AttentionDims, AttentionWeights,
};
pub use param::{ParamId, ParamStore, ParamTensor};
pub use real::Real;
pub use tape::{dropout_mask, Tape, Var};
pub use tensor::Tensor;
