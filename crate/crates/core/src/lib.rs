//! Temporally sparse attention for transformer inference.
//!
//! Keys are delta-encoded against a held reference: a dense basis vector
//! followed by sparse columns that only record elements which moved more
//! than a threshold. Attention scores against those keys are accumulated
//! recursively, touching only the stored nonzeros. A hybrid scheme keeps a
//! local window of exact scores (diagonal blocks during prefill, the most
//! recent tokens during decode) and uses the delta approximation elsewhere.
//!
//! [`tensor::dense_attention`] is the exact reference every approximate
//! path is measured against.

pub mod delta;
pub mod delta_matmul;
pub mod error;
pub mod hybrid;
pub mod kv_cache;
pub mod metrics;
pub mod tensor;

pub use delta::{
    build_delta_encoding, delta_encode_step, element_sparsity, element_sparsity_with_basis,
    init_state, reconstruct, ConstructionStrategy, DeltaEncoding, DeltaState, Direction,
    SparseDeltaColumn,
};
pub use delta_matmul::{
    delta_score_columns, delta_score_single_query, Exactness, MacCounter, ScoreMatrix,
};
pub use error::{Error, Result};
pub use hybrid::{
    computational_sparsity, decode_step, jigsaw_membership, prefill_attention,
    prefill_attention_ablation, prefill_window, DecodeOutput, HybridConfig, PrefillResult,
};
pub use kv_cache::{CacheMemory, DeltaKVCache};
pub use metrics::{
    compare_rows, compare_to_oracle, evaluate_prefill, merge_reports, AttentionReport, ErrorStats,
    MacBreakdown, Stage,
};
pub use tensor::{
    dense_attention, dot, matmul, row_softmax, scaled_scores, score_scale, CausalMask, DenseMatrix,
};
