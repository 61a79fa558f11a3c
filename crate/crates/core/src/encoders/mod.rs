//! Token/patch embeddings and the unimodal encoder stacks.

mod block;
mod config;
mod embed;

pub use block::{
    attention, ffn, head_projections, key_mask_row, multi_head_attention, post_ln_block, pre_ln_block,
    t_encoder_forward, v_encoder_forward, zero_block, BlockWeights, MASKED_LOGIT,
};
pub(crate) use block::{ffn_output, ln1, ln2};
pub use config::{Ablation, ModelConfig};
pub use embed::{patchify, unpatchify, PatchEmbedding, TextEmbedding};
