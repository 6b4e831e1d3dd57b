//! Offline model-based optimization with distribution-aware ranking surrogates.
//!
//! The crate covers benchmark tasks and offline datasets, an MLP surrogate
//! with hand-written backpropagation, MSE / global-ranking / distribution-aware
//! ranking objectives, projected gradient-ascent design search, and
//! diagnostics that measure ranking error and Wasserstein distances.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod optim;
pub mod search;
pub mod surrogate;
pub mod task;

pub use diagnostics::{
    audit_marginal_decomposition, audit_mse_to_rank, dist_to_manifold, ranking_error, ranking_error_scores,
    ranking_error_vs_radius, wasserstein1_assignment, wasserstein1_sorted, BoundReport, EvalPool, GroundMetric,
    PairSampling, RadiusRow, RankingErrorReport, Scorer,
};
pub use config::{ExperimentConfig, Profile, Seeds};
pub use error::{Error, Result};
pub use harness::{compare, run, sweep, Manifest, RunSummary, SweepGrid};
pub use objectives::{
    margin_rank_loss, partition, partition_scores, train_dar, train_mse, train_rank_global, zero_one_rank_loss,
    DarConfig, ObjectiveKind, PartitionedDataset, TrainOutcome,
};
pub use optim::{OptimizerConfig, TrainConfig};
pub use search::{ascend, project_box, propose_candidates, score_candidates, InitRule, SearchConfig, SearchResult};
pub use surrogate::{init_surrogate, zscore_adapt, Adaptation, Mlp, MlpSurrogate, SavedModel, Standardizer};
pub use task::{
    eval_branin, make_offline_dataset, normalized_score, DatasetConfig, OfflineDataset, TaskSpec,
};
