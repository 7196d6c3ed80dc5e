// SPDX-License-Identifier: Apache-2.0

use std::io;

use thiserror::Error;

use crate::label::ImportanceLabel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("pixel count must be at least 1")]
    EmptyNeuron,
    #[error("IaPAM covers {got} pixels, expected {expected}")]
    IapamLength { expected: usize, got: usize },
    #[error("activation ratio {0} is outside [0, 1]")]
    ActivationRatio(f64),
    #[error("noise sigma {0} must be finite and non-negative")]
    NoiseSigma(f64),
    #[error("image count must be at least 1")]
    NoImages,
    #[error("image has {got} pixels, expected {expected}")]
    ImageLength { expected: usize, got: usize },
    #[error("skip row has {got} entries, expected {expected}")]
    SkipRowLength { expected: usize, got: usize },
    #[error("pattern library has no template for label {0}")]
    MissingTemplate(ImportanceLabel),
    #[error("pattern library holds two templates for label {0}")]
    DuplicateTemplate(ImportanceLabel),
    #[error("template for label {0} is empty")]
    EmptyTemplate(ImportanceLabel),
    #[error("leakage offset {offset} lies outside the {len}-sample template for label {label}")]
    LeakOffset {
        label: ImportanceLabel,
        offset: usize,
        len: usize,
    },
    #[error("threshold {threshold} is outside the score range of {metric}")]
    Threshold { threshold: f64, metric: String },
    #[error("layer has no neurons")]
    EmptyLayer,
    #[error("neurons in one layer must share a pixel count")]
    RaggedLayer,
    #[error("invalid IaPAM string {0:?}: expected only '0' and '1'")]
    IapamSyntax(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("slice has {slice} samples but template has {template}")]
    LengthMismatch { slice: usize, template: usize },
    #[error("calibration needs at least one training trace")]
    EmptyTrainingSet,
    #[error("training trace {0} carries no ground truth")]
    MissingGroundTruth(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("no classified sequences to process")]
    Empty,
    #[error("sequence {index} has {got} entries, expected {expected}")]
    MalformedClassification { index: usize, expected: usize, got: usize },
    #[error("sequence {0} marks every MAC as skipped")]
    NothingProcessed(usize),
    #[error("{masks} masks supplied for {images} images")]
    MaskCount { masks: usize, images: usize },
    #[error("mask {index} covers {got} pixels, expected {expected}")]
    MaskLength { index: usize, expected: usize, got: usize },
    #[error("sequence {index} has {got} important MACs, expected {expected}")]
    Alignment { index: usize, expected: usize, got: usize },
    #[error("important MAC entries have inconsistent lengths ({first} vs {other})")]
    BlockLength { first: usize, other: usize },
    #[error("{sequences} sequences supplied for {traces} traces")]
    TraceCount { sequences: usize, traces: usize },
    #[error("entry at sample {start} with length {len} runs past the {trace_len}-sample trace")]
    EntryOutOfRange { start: usize, len: usize, trace_len: usize },
    #[error("neuron {neuron} is outside a sequence of {entries} entries")]
    NeuronOutOfRange { neuron: usize, entries: usize },
    #[error("sequence contains important MACs; IaPAM derivation expects executed/skipped labels only")]
    UnexpectedImportant,
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("candidate {0} appears twice")]
    DuplicateCandidate(i8),
    #[error("target weight index {index} is outside a {pixel_count}-pixel neuron")]
    TargetOutOfRange { index: usize, pixel_count: usize },
    #[error("known prefix covers {got} weights, target {target} needs {target}")]
    MissingPrefix { target: usize, got: usize },
    #[error("correlation needs at least 2 traces, got {0}")]
    TooFewTraces(usize),
    #[error("window {start}..{end} exceeds row length {len}")]
    WindowOutOfRange { start: usize, end: usize, len: usize },
    #[error("window is empty")]
    EmptyWindow,
    #[error("hypothesis matrix covers {hyps} traces but {traces} traces were supplied")]
    TraceCount { hyps: usize, traces: usize },
    #[error("accumulators have different shapes")]
    ShapeMismatch,
    #[error("true weight {0} is not among the candidates")]
    TrueWeightAbsent(i8),
    #[error("guessing entropy needs at least one experiment")]
    NoExperiments,
    #[error("rank {0} is not 1-based")]
    InvalidRank(usize),
    #[error("trace counts must be strictly increasing")]
    Schedule,
    #[error("experiments report {got} ranks, expected {expected}")]
    RankCount { expected: usize, got: usize },
    #[error("adjacency study: {0}")]
    Adjacency(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after declared payload")]
    TrailingBytes(u64),
    #[error("unknown flag bits {0:#06x}")]
    Flags(u16),
    #[error("invalid ground-truth label byte {0}")]
    Label(u8),
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("{0} does not fit the container's 32-bit count fields")]
    TooLarge(&'static str),
    #[error("config hash mismatch: {left} vs {right}")]
    ConfigMismatch { left: String, right: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Any failure of a multi-stage run.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("variant mismatch: expected {expected}, artifacts hold {found}")]
    Variant { expected: String, found: String },
}
