//! The miniature denoiser: prompt embedding, encoder-decoder with one
//! cross-attention block, and a control branch gated by a feature mask.

mod arch;
mod attention;
pub mod checkpoint;
mod forward;
mod prompt;
pub mod vocab;
mod weights;

pub use arch::ArchConfig;
pub use attention::AttentionStack;
pub use forward::{
    attention_on_tape, attention_seed, cross_attention, denoiser_forward, extract_attention,
    forward_on_tape, fuse_control, AttentionNodes, ForwardNodes, ForwardRequest, FtrDirective,
    MaskMode,
};
pub use prompt::{embed_prompt, prompt_positions, TokenPrompt};
pub use vocab::{kind_of, parse_prompt, token_for, BACKGROUND, PAD, VOCAB_SIZE};
pub use weights::{layout, DenoiserWeights, Group, ParamSpec, ZERO_PROJECTIONS};
