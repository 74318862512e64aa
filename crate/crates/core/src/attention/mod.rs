//! Rotary position tables, joint attention with grafted reference rows, and
//! the toy transformer block built on them.

pub mod block;
pub mod fusion;
pub mod rope;

pub use block::{BlockInput, BlockOutput, BlockRecord, GraftAction, Matrix, ToyBlock};
pub use fusion::{
    concat_kv, concat_pe, grafted_attention, grafted_attention_with_probs, grafted_logits, joint_attention,
    matched_coord, replace_features, AttentionOutput, GraftPacket, TokenSequence,
};
pub use rope::{build_rope, build_rope_with_theta, RopeTable, DEFAULT_ROPE_THETA};
