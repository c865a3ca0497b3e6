//! Dense, MoE and MoLE transformer forward passes.
//!
//! Block layout is sequential: `h1 = h + Attn(input_norm(h))`, then the expert
//! sub-layer on `post_attn_norm(h1)` with its own residual. MoLE routed experts
//! read the token's embedding row through a per-layer `expert_norm` instead of
//! the hidden state, which is what lets them be precomputed per vocabulary id.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod layer;
pub mod params;

pub use checkpoint::{checkpoint_bytes, parse_checkpoint, read_checkpoint, write_checkpoint};
pub use config::{find_preset, table_presets, ModelConfig, Preset, Variant, TABLE_VOCAB};
pub use forward::{
    argmax, embed, forward_hidden, forward_with_routing, forward_with_state, model_forward, DecodeState, Form,
    PendingRows, RowSource, SelectHook,
};
pub use layer::{
    attention_forward, dense_layer_forward, gates_for_selection, moe_layer_forward, mole_layer_forward_infer,
    mole_layer_forward_train, route, router_scores, top_k_indices, GateResult, LayerKv,
};
pub use params::{AttentionParams, Ffn, LayerParams, Linear, ModelParams};
