// SPDX-License-Identifier: Apache-2.0

//! Simulation and side-channel analysis of MAC-skipping DNN countermeasures.
//!
//! * [`leakage`]: synthetic power traces of a quantized first layer whose
//!   non-important MACs are randomly skipped.
//! * [`patterns`]: template matching that labels each MAC segment.
//! * [`preprocess`]: partitioning, pixel filtering and realignment.
//! * [`cpa`]: correlation power analysis and guessing entropy.
//! * [`tracestore`]: binary containers and CSV export.
//! * [`experiment`]: experiment specs and end-to-end pipelines.

pub mod cpa;
pub mod error;
pub mod experiment;
pub mod label;
pub mod leakage;
pub mod patterns;
pub mod preprocess;
pub mod tracestore;

pub use cpa::{
    adjacency_study, all_gap_skipped_rate, correlate, guessing_entropy, hypotheses, rank_trajectory, recover_weight,
    trace_schedule, AdjacencyInput, AdjacencyReport, AttackConfig, CandidateSet, CorrelationAccumulator, GeCurve,
    GePoint, HypothesisMatrix, LeakageModel, RankTracker, Ranking, ScoreMatrix,
};
pub use error::{AttackError, ConfigError, PatternError, PipelineError, PreprocessError, StoreError};
pub use experiment::{ExperimentSpec, Target, TargetResult};
pub use label::ImportanceLabel;
pub use leakage::{
    generate_images, hamming_weight, simulate_experiment, simulate_layer_experiment, simulate_trace, Iapam, ImageSet,
    NeuronConfig, SimConfig, Simulator, SkipTable, Trace, TraceSet, Variant,
};
pub use patterns::{
    calibrate_templates, classify_set, classify_trace, similarity, Calibration, ClassifiedSequence, Entry, MatchConfig,
    Metric, PatternLibrary, PatternTemplate,
};
pub use preprocess::{
    apply_masks, build_pixel_masks, concatenate_important, derive_iapam, partition_and_retain, AlignedTraceSet,
    PartitionOutcome, PixelMask,
};
pub use tracestore::Metadata;
