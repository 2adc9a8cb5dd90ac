//! Dense tensors, reverse-mode autodiff, layers, and the optimizer.

pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use layers::{
    attention_weights, dot_attention, gru_forward, mlp_forward, radius_edges, spatial_attention,
    ugru_encode, Activation, AttentionBlock, Direction, Edge, GruCell, Linear, Mlp,
    SpatialAttention, Ugru,
};
pub use optim::{adamw_step, clip_grad_norm, AdamW, StepDecay};
pub use params::{Bound, Checkpoint, ParamId, ParamStore, CHECKPOINT_SCHEMA_VERSION};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
