//! Weakly-supervised collision detection over frozen video/text embeddings.
//!
//! Snippet embeddings pass through a residual adapter and a linear detector;
//! per-snippet logits are pooled with temperature-controlled log-sum-exp so
//! that clip-level labels suffice for training.

pub mod datakit;
pub mod embeddings;
pub mod error;
pub mod evalkit;
pub mod inference;
pub mod losses;
pub mod mil;
pub mod model;
pub mod trainer;

pub use embeddings::{
    cosine, encode_text, encode_video_snippet, CachedEncoder, Embedding, EmbeddingCache, Encoder, FrameWindow,
    Source, StubEncoder, DEFAULT_DIM,
};
pub use error::{Result, VlaadError};
pub use inference::{make_global_state, score_clip_trace, toy_policy_step, CausalBuffer, GlobalState, ToyPolicy};
pub use losses::{
    binary_cross_entropy_from_logit, cosine_alignment_loss, mil_alignment_loss, uncertainty_weighted_total,
    LossBreakdown,
};
pub use mil::{lse_pool, pooling_attention, segment_clip, sigmoid, Bag, RiskTrace, DEFAULT_GAMMA};
pub use model::{adapt, detect_logit, forward_bag, AdapterParams, DetectorParams, ModelCheckpoint};
pub use trainer::{train, TrainConfig, TrainMode, TrainOutcome};
