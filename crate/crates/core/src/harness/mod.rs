//! Metrics, pipeline orchestration, ablations and reports.
//!
//! [`run_experiment`] generates the world and corpora, fits the intention
//! space, trains the intention predictor, builds the reference index, trains
//! the base and modulated location predictors and evaluates on held-out
//! disaster trajectories. Each stage is cached under a hash of its inputs.
//!
//! ```
//! use intentmob::harness::ranking_metrics_from_ranks;
//!
//! let m = ranking_metrics_from_ranks(&[1, 3]).unwrap();
//! assert!((m.mrr - 2.0 / 3.0).abs() < 1e-12);
//! assert_eq!(m.acc_at_1, 0.5);
//! ```

mod cache;
mod config;
mod metrics;
mod pipeline;
mod report;
mod stages;

pub use cache::{json_load, json_save, stage_key, CacheEvent, StageCache};
pub use config::{
    AblationFlag, Ablations, BackendKind, ExperimentConfig, PredictionSettings, RefinerSettings,
    RetrievalSettings,
};
pub use metrics::{
    composite_score, compute_immobility_prf, compute_intention_metrics, compute_ranking_metrics,
    ndcg_single, ranking_metrics_from_ranks, ImmobilityMetrics, IntentionMetrics, RankingMetrics,
};
pub use pipeline::{
    backend_for, build_artifacts, location_metrics, build_reference_index, fit_intentions, predictor_sequences, train_clip, run_experiment, run_experiment_with, Artifacts, ExperimentOutcome,
    SampleAudit, TargetPartition,
};
pub use stages::{
    intention_samples, positions, sample_prompt, space_hash, IntentionSample, PredictionsFile,
    PromptContext, RefinedFile, RefinedSample, STAGE_FILE_VERSION,
};
pub use report::{
    AuditSummary, ExperimentReport, LocationMetrics, SplitInfo, TrainingSummary, REPORT_VERSION,
};
