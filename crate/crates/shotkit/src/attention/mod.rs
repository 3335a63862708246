//! Masked multi-head attention and a desk-scale transformer that composes
//! camera injection with the shot-aware mask.
//!
//! Masked pairs are excluded from the softmax reduction instead of being
//! pushed to a large negative logit, so their attention weight is exactly
//! zero and cross-shot isolation is structural, not approximate. All
//! reductions run in a fixed order; repeated runs are bit-identical.
//!
//! [`core`] holds the attention primitive with analytic gradients; [`block`]
//! stacks it into a toy model with per-frame camera injection, a per-layer
//! mask schedule, a leakage probe, and a small training loop.

pub mod block;
pub mod core;

pub use block::{
    block_forward, block_forward_cached, leakage_probe, train_demo, BlockConfig,
    BlockForwardCache, ShotTransformer,
};
pub use core::{
    layer_backward, layer_forward, masked_attention, masked_attention_backward,
    masked_attention_cached, AttentionCache, AttentionError, AttentionGradients, AttentionParams,
    LayerCache,
};
