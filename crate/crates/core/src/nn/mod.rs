//! Differentiable-array substrate and neural building blocks.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_params};
pub use layers::{
    linear, positional_embedding, Conv1d, LayerNorm, Linear, Lstm, Mlp, MultiHeadAttention,
    MultiScaleNode,
};
pub use params::{ParamBuilder, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
