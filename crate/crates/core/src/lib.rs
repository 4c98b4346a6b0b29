//! Sparse attention over a mean-pooled sequence pyramid.
//!
//! The layer pools queries, keys, and values into a multi-resolution pyramid,
//! scores every pooled entry with parameter-free projection norms, selects a
//! causally ordered subsequence of entries under a fixed budget, attends over
//! that subsequence only, and scatters results back to base positions. Cost
//! scales with the subsequence size instead of the full sequence length.

pub mod attention;
pub mod checks;
pub mod complexity;
pub mod error;
pub mod layer;
pub mod numerics;
pub mod pyramid;
pub mod scalar;
pub mod scatter;
pub mod scoring;
pub mod selection;
pub mod trainer;

pub use attention::{
    attend_subsequence, blockwise_attend, gather, gather_backward, sdpa_backward, sdpa_reference,
    GatheredSeq, PyramidGrads,
};
pub use checks::CheckResult;
pub use complexity::{
    balanced_levels, dense_flop_table, flop_table, log_log_slope, scaling_sweep, subseq_size,
    sweep_csv, CostBreakdown, SweepRow, SweepSettings,
};
pub use error::{Error, Result};
pub use layer::{
    dense_backward, dense_forward, lighthouse_backward, lighthouse_forward,
    lighthouse_forward_with, AttentionLayerGrads, AttentionLayerParams, DenseTape, LighthouseTape,
};
pub use scatter::{contributor_counts, scatter_back, scatter_backward, scatter_ranges, WriteRange};
pub use numerics::SeqMatrix;
pub use pyramid::{build_pyramid, LighthouseConfig, Pyramid, ScorerKind, SelectionVariant};
pub use scalar::Scalar;
pub use scoring::{base_scores, pooled_scores, ScoreSet};
pub use selection::{
    causal_order, chunked_topk, select_indices, shard_local_select, Provenance, SelectionEntry,
    SelectionIndex,
};
pub use trainer::{
    synth_source, train_dense_baseline, train_two_stage, MarkovSource, ModelParams, TrainConfig,
    TrainReport,
};

/// Single-precision sequence matrix.
pub type SeqMatrix32 = SeqMatrix<f32>;
/// Double-precision sequence matrix.
pub type SeqMatrix64 = SeqMatrix<f64>;
