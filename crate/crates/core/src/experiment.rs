// SPDX-License-Identifier: Apache-2.0

//! Experiment description and the three attack pipelines: raw traces with a
//! nominal window, traces realigned by classification, and IaPAM derivation
//! for the control-flow-free variant.

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cpa::{guessing_entropy, trace_schedule, AttackConfig, GeCurve, RankTracker};
use crate::error::{ConfigError, PipelineError, PreprocessError};
use crate::label::ImportanceLabel;
use crate::leakage::{
    derive_seed, generate_images, random_layer, Iapam, ImageSet, NeuronConfig, SimConfig, Simulator, TraceSet, Variant,
};
use crate::patterns::{
    calibrate_templates, classify_set, Calibration, ClassifiedSequence, MatchConfig, Metric, PatternLibrary,
};
use crate::preprocess::{
    apply_masks, build_pixel_masks, concatenate_important, derive_iapam, partition_and_retain, AlignedTraceSet,
    PartitionOutcome,
};

/// Noise level used by the default spec. Against reference templates of a
/// few hundred units classification stays exact, while CPA on unprotected
/// traces needs on the order of a thousand traces.
pub const DEFAULT_NOISE_SIGMA: f64 = 10.0;

const DOMAIN_WEIGHTS: u64 = 0x5745_4947;
const DOMAIN_IMAGES: u64 = 0x494d_4147;
const DOMAIN_SIM: u64 = 0x5349_4d55;
const DOMAIN_TRAINING: u64 = 0x5452_4149;

fn default_neuron_count() -> usize {
    5
}
fn default_pixel_count() -> usize {
    32
}
fn default_ratio() -> f64 {
    0.5
}
fn default_sigma() -> f64 {
    DEFAULT_NOISE_SIGMA
}
fn default_variant() -> Variant {
    Variant::Branched
}
fn default_targets() -> Vec<usize> {
    (1..=7).collect()
}
fn default_schedule_start() -> usize {
    50
}
fn default_per_decade() -> usize {
    10
}
fn default_training() -> usize {
    200
}
fn default_experiments() -> usize {
    5
}
fn default_trace_count() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(default = "default_neuron_count")]
    pub neuron_count: usize,
    #[serde(default = "default_pixel_count")]
    pub pixel_count: usize,
    /// Explicit weights, one row per neuron. Drawn from the spec seed when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<i8>>>,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            neuron_count: default_neuron_count(),
            pixel_count: default_pixel_count(),
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    /// Defaults to the reference map repeated to the pixel count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iapam: Option<Iapam>,
    #[serde(default = "default_ratio")]
    pub activation_ratio: f64,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub extended_leakage: bool,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            iapam: None,
            activation_ratio: default_ratio(),
            noise_sigma: default_sigma(),
            extended_leakage: false,
            variant: default_variant(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// Weight indices attacked in every neuron.
    #[serde(default = "default_targets")]
    pub targets: Vec<usize>,
    #[serde(default = "default_schedule_start")]
    pub schedule_start: usize,
    #[serde(default = "default_per_decade")]
    pub schedule_per_decade: usize,
    #[serde(default)]
    pub metric: Metric,
    /// Classification threshold; calibrated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default = "default_training")]
    pub training_traces: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            targets: default_targets(),
            schedule_start: default_schedule_start(),
            schedule_per_decade: default_per_decade(),
            metric: Metric::default(),
            threshold: None,
            training_traces: default_training(),
        }
    }
}

/// Everything needed to regenerate an experiment campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_experiments")]
    pub experiment_count: usize,
    /// Traces per experiment.
    #[serde(default = "default_trace_count")]
    pub trace_count: usize,
    #[serde(default)]
    pub layer: LayerSpec,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub attack: AttackSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            experiment_count: default_experiments(),
            trace_count: default_trace_count(),
            layer: LayerSpec::default(),
            sim: SimSpec::default(),
            attack: AttackSpec::default(),
        }
    }
}

/// The part of a spec that determines simulated artifacts; hashed into every
/// container so attacks cannot silently mix campaigns.
#[derive(Serialize)]
struct SimulationIdentity<'a> {
    seed: u64,
    experiment_count: usize,
    trace_count: usize,
    iapam: String,
    activation_ratio: f64,
    noise_sigma: f64,
    extended_leakage: bool,
    variant: Variant,
    neurons: &'a [NeuronConfig],
}

#[derive(Serialize)]
struct NeuronTable<'a> {
    neuron: &'a [NeuronConfig],
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let spec: Self = toml::from_str(text).map_err(|e| PipelineError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Spec(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Spec(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.experiment_count == 0 {
            return Err(PipelineError::Spec("experiment_count must be at least 1".into()));
        }
        if self.trace_count == 0 {
            return Err(ConfigError::NoImages.into());
        }
        if self.layer.neuron_count == 0 {
            return Err(ConfigError::EmptyLayer.into());
        }
        if self.layer.pixel_count == 0 {
            return Err(ConfigError::EmptyNeuron.into());
        }
        if let Some(rows) = &self.layer.weights {
            if rows.len() != self.layer.neuron_count {
                return Err(PipelineError::Spec(format!(
                    "{} weight rows for {} neurons",
                    rows.len(),
                    self.layer.neuron_count
                )));
            }
            if rows.iter().any(|r| r.len() != self.layer.pixel_count) {
                return Err(ConfigError::RaggedLayer.into());
            }
        }
        if let Some(t) = self.attack.threshold {
            MatchConfig::new(t, self.attack.metric)?;
        }
        if let Some(&bad) = self
            .attack
            .targets
            .iter()
            .find(|&&i| i == 0 || i >= self.layer.pixel_count)
        {
            return Err(PipelineError::Spec(format!("target weight index {bad} out of range")));
        }
        self.sim_config(0).validate(self.layer.pixel_count)?;
        Ok(())
    }

    pub fn iapam(&self) -> Iapam {
        self.sim
            .iapam
            .clone()
            .unwrap_or_else(|| Iapam::reference(self.layer.pixel_count))
    }

    pub fn neurons(&self) -> Result<Vec<NeuronConfig>, ConfigError> {
        match &self.layer.weights {
            Some(rows) => rows.iter().map(|r| NeuronConfig::new(r.clone(), 0)).collect(),
            None => random_layer(
                self.layer.neuron_count,
                self.layer.pixel_count,
                derive_seed(self.seed, DOMAIN_WEIGHTS),
            ),
        }
    }

    fn sim_with_seed(&self, rng_seed: u64) -> SimConfig {
        SimConfig {
            iapam: self.iapam(),
            activation_ratio: self.sim.activation_ratio,
            noise_sigma: self.sim.noise_sigma,
            extended_leakage: self.sim.extended_leakage,
            variant: self.sim.variant,
            rng_seed,
        }
    }

    /// Simulation settings of experiment `e`.
    pub fn sim_config(&self, e: usize) -> SimConfig {
        self.sim_with_seed(derive_seed(derive_seed(self.seed, DOMAIN_SIM), e as u64))
    }

    /// Settings of the profiling device used for template calibration.
    pub fn training_sim_config(&self) -> SimConfig {
        self.sim_with_seed(derive_seed(self.seed, DOMAIN_TRAINING))
    }

    pub fn images(&self, e: usize) -> Result<ImageSet, ConfigError> {
        self.images_n(e, self.trace_count)
    }

    /// The first `count` images of experiment `e`'s input stream.
    pub fn images_n(&self, e: usize, count: usize) -> Result<ImageSet, ConfigError> {
        generate_images(
            count,
            self.layer.pixel_count,
            derive_seed(derive_seed(self.seed, DOMAIN_IMAGES), e as u64),
        )
    }

    pub fn training_images(&self) -> Result<ImageSet, ConfigError> {
        generate_images(
            self.attack.training_traces.max(1),
            self.layer.pixel_count,
            derive_seed(self.seed, DOMAIN_TRAINING ^ DOMAIN_IMAGES),
        )
    }

    /// Geometric schedule up to `max` traces.
    pub fn schedule(&self, max: usize) -> Vec<usize> {
        trace_schedule(self.attack.schedule_start, max, self.attack.schedule_per_decade)
    }

    /// SHA-256 over the canonical TOML of everything that shapes simulated
    /// data.
    pub fn config_hash(&self) -> Result<String, PipelineError> {
        let neurons = self.neurons()?;
        let id = SimulationIdentity {
            seed: self.seed,
            experiment_count: self.experiment_count,
            trace_count: self.trace_count,
            iapam: self.iapam().to_string(),
            activation_ratio: self.sim.activation_ratio,
            noise_sigma: self.sim.noise_sigma,
            extended_leakage: self.sim.extended_leakage,
            variant: self.sim.variant,
            neurons: &neurons,
        };
        let text = toml::to_string(&id).map_err(|e| PipelineError::Spec(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    /// Weights as TOML, for reports.
    pub fn neurons_toml(&self) -> Result<String, PipelineError> {
        let neurons = self.neurons()?;
        toml::to_string(&NeuronTable { neuron: &neurons }).map_err(|e| PipelineError::Spec(e.to_string()))
    }
}

/// Sample range of MAC `mac` (layer-wide index) when every MAC runs a
/// `seg_len`-sample code path.
pub fn nominal_window(mac: usize, seg_len: usize) -> Range<usize> {
    mac * seg_len..(mac + 1) * seg_len
}

/// Length shared by the processed-MAC templates, which fixes the nominal
/// layout of an unprotected trace.
pub fn processed_segment_len(lib: &PatternLibrary, variant: Variant) -> Result<usize, PipelineError> {
    let executed = lib.require(ImportanceLabel::Executed)?.len();
    if variant == Variant::Branched {
        let important = lib.require(ImportanceLabel::Important)?.len();
        if important != executed {
            return Err(PipelineError::Spec(format!(
                "nominal windows need equal I and E template lengths ({important} vs {executed})"
            )));
        }
    }
    Ok(executed)
}

/// One attacked weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub neuron: usize,
    pub weight_index: usize,
}

/// Result of one target in one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRun {
    pub ranks: Vec<f64>,
    /// Top-ranked candidate after the last scheduled count.
    pub best: i8,
}

/// Merged result of one target over all experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target: Target,
    pub true_weight: i8,
    pub important: bool,
    pub curve: GeCurve,
    pub best: Vec<i8>,
}

impl TargetResult {
    pub fn recovered(&self) -> bool {
        self.curve.final_ge() == Some(0.0)
    }
}

fn merge_runs(
    targets: &[Target],
    neurons: &[NeuronConfig],
    iapam: &Iapam,
    schedule: &[usize],
    per_experiment: Vec<Vec<TargetRun>>,
) -> Result<Vec<TargetResult>, PipelineError> {
    targets
        .iter()
        .enumerate()
        .map(|(t, &target)| {
            let ranks: Vec<Vec<f64>> = per_experiment.iter().map(|runs| runs[t].ranks.clone()).collect();
            Ok(TargetResult {
                target,
                true_weight: neurons[target.neuron].weights[target.weight_index],
                important: iapam.is_important(target.weight_index),
                curve: guessing_entropy(target.weight_index, schedule, &ranks)?,
                best: per_experiment.iter().map(|runs| runs[t].best).collect(),
            })
        })
        .collect()
}

/// Streaming CPA on raw layer traces: one tracker per target, each looking
/// at the nominal segment of its MAC.
pub struct RawAttack {
    trackers: Vec<RankTracker>,
    pixel_count: usize,
}

impl RawAttack {
    pub fn new(
        neurons: &[NeuronConfig],
        targets: &[Target],
        seg_len: usize,
        schedule: &[usize],
    ) -> Result<Self, PipelineError> {
        let pixel_count = neurons.first().ok_or(ConfigError::EmptyLayer)?.pixel_count();
        let trackers = targets
            .iter()
            .map(|t| {
                let neuron = neurons
                    .get(t.neuron)
                    .ok_or_else(|| PipelineError::Spec(format!("no neuron {}", t.neuron)))?;
                let mac = t.neuron * pixel_count + t.weight_index;
                let cfg = AttackConfig::for_weight(&neuron.weights, t.weight_index, vec![nominal_window(mac, seg_len)]);
                Ok(RankTracker::new(
                    cfg,
                    pixel_count,
                    neuron.weights[t.weight_index],
                    schedule.to_vec(),
                )?)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(Self { trackers, pixel_count })
    }

    /// Feeds a batch; `images` is indexed by each trace's image index.
    pub fn feed(&mut self, traces: &TraceSet, images: &ImageSet) -> Result<(), PipelineError> {
        if images.pixel_count() != self.pixel_count {
            return Err(ConfigError::ImageLength {
                expected: self.pixel_count,
                got: images.pixel_count(),
            }
            .into());
        }
        self.trackers.par_iter_mut().try_for_each(|tracker| {
            for trace in traces.iter() {
                let n = trace.image_index as usize;
                if n >= images.len() {
                    return Err(PipelineError::Spec(format!("trace references missing image {n}")));
                }
                let image = images.image(n);
                tracker.push(image, image, &trace.samples)?;
            }
            Ok(())
        })
    }

    pub fn is_done(&self) -> bool {
        self.trackers.iter().all(RankTracker::is_done)
    }

    pub fn finish(self) -> Result<Vec<TargetRun>, PipelineError> {
        self.trackers
            .into_iter()
            .map(|t| {
                let best = t.ranking()?.best().unwrap_or(0);
                Ok(TargetRun {
                    ranks: t.finish()?,
                    best,
                })
            })
            .collect()
    }
}

/// Traces simulated per batch by the streaming drivers.
pub const SIM_BATCH: usize = 2_000;

/// Simulates experiment `e` in batches and attacks `targets` on the raw
/// traces up to the last point of `schedule`. Only the first
/// `neuron_limit` neurons are simulated; the trace prefix they produce is
/// identical to that of the full layer.
pub fn raw_attack_experiment(
    spec: &ExperimentSpec,
    lib: &PatternLibrary,
    e: usize,
    targets: &[Target],
    schedule: &[usize],
    neuron_limit: usize,
) -> Result<Vec<TargetRun>, PipelineError> {
    let neurons = spec.neurons()?;
    let neurons = &neurons[..neuron_limit.clamp(1, neurons.len())];
    let sim = spec.sim_config(e);
    let simulator = Simulator::new(neurons, &sim, lib)?;
    let seg_len = processed_segment_len(lib, sim.variant)?;
    let total = *schedule.last().ok_or(crate::error::AttackError::Schedule)?;
    let images = spec.images_n(e, total)?;
    let mut attack = RawAttack::new(neurons, targets, seg_len, schedule)?;
    let mut start = 0;
    while start < total {
        let end = (start + SIM_BATCH).min(total);
        let (traces, _) = simulator.run_range(&images, start..end)?;
        attack.feed(&traces, &images)?;
        start = end;
    }
    attack.finish()
}

/// [`raw_attack_experiment`] over every experiment, merged into GE curves.
pub fn raw_attack(
    spec: &ExperimentSpec,
    lib: &PatternLibrary,
    targets: &[Target],
    schedule: &[usize],
    neuron_limit: usize,
) -> Result<Vec<TargetResult>, PipelineError> {
    let runs = (0..spec.experiment_count)
        .map(|e| raw_attack_experiment(spec, lib, e, targets, schedule, neuron_limit))
        .collect::<Result<Vec<_>, _>>()?;
    merge_runs(targets, &spec.neurons()?, &spec.iapam(), schedule, runs)
}

/// Every neuron crossed with the spec's target indices.
pub fn all_targets(spec: &ExperimentSpec) -> Vec<Target> {
    (0..spec.layer.neuron_count)
        .flat_map(|neuron| {
            spec.attack
                .targets
                .iter()
                .map(move |&weight_index| Target { neuron, weight_index })
        })
        .collect()
}

/// Template calibration on ground-truth traces from the profiling device.
pub fn calibrate(spec: &ExperimentSpec, lib: &PatternLibrary) -> Result<Calibration, PipelineError> {
    let neurons = spec.neurons()?;
    let sim = spec.training_sim_config();
    let images = spec.training_images()?;
    let (training, _) = Simulator::new(&neurons, &sim, &classification_library(lib, sim.variant))?.run(&images)?;
    let probe = MatchConfig::new(0.0, spec.attack.metric)?;
    Ok(calibrate_templates(
        &training,
        &classification_library(lib, sim.variant),
        &probe,
    )?)
}

/// Templates the attacker can tell apart for `variant`.
pub fn classification_library(lib: &PatternLibrary, variant: Variant) -> PatternLibrary {
    match variant {
        Variant::Branched => lib.clone(),
        Variant::ControlFlowFree => lib.restricted(&[ImportanceLabel::Executed, ImportanceLabel::Skipped]),
        Variant::Unprotected => lib.restricted(&[ImportanceLabel::Executed]),
    }
}

/// Preprocessed data of one neuron, restricted to the retained partition.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronView {
    pub neuron: usize,
    pub partition: PartitionOutcome,
    /// Classification of each retained trace, this neuron's entries only.
    pub seqs: Vec<ClassifiedSequence>,
    pub aligned: AlignedTraceSet,
    /// Retained images with skipped pixels zeroed.
    pub filtered: ImageSet,
    /// Retained images as captured.
    pub raw: ImageSet,
    pub image_indices: Vec<u32>,
}

/// Partition, mask and concatenate for neuron `neuron`. `seqs[n]` classifies
/// `traces[n]` (a whole layer trace).
pub fn preprocess_neuron(
    traces: &TraceSet,
    seqs: &[ClassifiedSequence],
    images: &ImageSet,
    neuron: usize,
) -> Result<NeuronView, PipelineError> {
    let pixel_count = images.pixel_count();
    if seqs.len() != traces.len() {
        return Err(PreprocessError::TraceCount {
            sequences: seqs.len(),
            traces: traces.len(),
        }
        .into());
    }
    // Sequences that do not even cover this neuron form their own (empty)
    // view and lose the partition vote.
    let views: Vec<ClassifiedSequence> = seqs
        .iter()
        .map(|s| s.neuron(neuron, pixel_count).unwrap_or_default())
        .collect();
    let partition = partition_and_retain(&views)?;
    let kept: Vec<ClassifiedSequence> = partition.retained.iter().map(|&n| views[n].clone()).collect();
    if kept.first().is_some_and(|s| s.len() != pixel_count) {
        return Err(PreprocessError::NeuronOutOfRange {
            neuron,
            entries: kept[0].len(),
        }
        .into());
    }
    let masks = build_pixel_masks(&kept, pixel_count)?;
    let image_indices: Vec<u32> = partition
        .retained
        .iter()
        .map(|&n| traces.traces[n].image_index)
        .collect();
    let positions: Vec<usize> = image_indices.iter().map(|&i| i as usize).collect();
    if let Some(&bad) = positions.iter().find(|&&i| i >= images.len()) {
        return Err(PipelineError::Spec(format!("trace references missing image {bad}")));
    }
    let raw = images.select(&positions);
    let filtered = apply_masks(&raw, &masks)?;
    let aligned = concatenate_important(&traces.select(&partition.retained), &kept)?;
    Ok(NeuronView {
        neuron,
        partition,
        seqs: kept,
        aligned,
        filtered,
        raw,
        image_indices,
    })
}

/// CPA on aligned rows for the targets of one neuron that appear as aligned
/// blocks. Targets without a block are reported as errors.
pub fn aligned_attack(
    view: &NeuronView,
    weights: &[i8],
    weight_indices: &[usize],
    schedule: &[usize],
) -> Result<Vec<TargetRun>, PipelineError> {
    weight_indices
        .par_iter()
        .map(|&i| {
            let block = view.aligned.block_of_pixel(i).ok_or_else(|| {
                PipelineError::Spec(format!("weight {i} of neuron {} has no aligned block", view.neuron))
            })?;
            let cfg = AttackConfig::for_weight(weights, i, vec![view.aligned.block(block)]);
            let mut tracker = RankTracker::new(cfg, view.filtered.pixel_count(), weights[i], schedule.to_vec())?;
            for (n, row) in view.aligned.rows.iter().enumerate() {
                if tracker.is_done() {
                    break;
                }
                let image = view.filtered.image(n);
                tracker.push(image, image, row)?;
            }
            let best = tracker.ranking()?.best().unwrap_or(0);
            Ok(TargetRun {
                ranks: tracker.finish()?,
                best,
            })
        })
        .collect()
}

/// Per-experiment summary of the realignment pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircumventionStats {
    pub experiment: usize,
    /// Per-MAC label error against ground truth, when it was available.
    pub label_error_rate: Option<f64>,
    /// Retained fraction per neuron.
    pub retained_fraction: Vec<f64>,
}

/// Label error of `seqs` against the ground truth carried by `traces`.
pub fn label_error_rate(traces: &TraceSet, seqs: &[ClassifiedSequence]) -> Option<f64> {
    if !traces.has_ground_truth() {
        return None;
    }
    let mut errors = 0;
    let mut total = 0;
    for (t, s) in traces.iter().zip(seqs) {
        let truth = t.ground_truth.as_deref().unwrap_or_default();
        errors += crate::patterns::label_errors(&s.labels(), truth);
        total += truth.len();
    }
    Some(errors as f64 / total.max(1) as f64)
}

/// Preprocess and attack one experiment's traces given their
/// classification (`seqs[n]` for `traces[n]`).
pub fn circumvent_experiment(
    traces: &TraceSet,
    seqs: &[ClassifiedSequence],
    images: &ImageSet,
    neurons: &[NeuronConfig],
    targets: &[Target],
    schedule: &[usize],
) -> Result<(Vec<TargetRun>, Vec<NeuronView>), PipelineError> {
    let mut runs: Vec<Option<TargetRun>> = vec![None; targets.len()];
    let mut views = Vec::new();
    for (k, neuron) in neurons.iter().enumerate() {
        let mine: Vec<usize> = (0..targets.len()).filter(|&t| targets[t].neuron == k).collect();
        let view = preprocess_neuron(traces, seqs, images, k)?;
        if !mine.is_empty() {
            let indices: Vec<usize> = mine.iter().map(|&t| targets[t].weight_index).collect();
            for (slot, run) in mine
                .iter()
                .zip(aligned_attack(&view, &neuron.weights, &indices, schedule)?)
            {
                runs[*slot] = Some(run);
            }
        }
        views.push(view);
    }
    let runs = runs
        .into_iter()
        .zip(targets)
        .map(|(r, t)| r.ok_or_else(|| PipelineError::Spec(format!("no neuron {}", t.neuron))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((runs, views))
}

/// Important targets of the spec (unimportant ones have no aligned block).
pub fn important_targets(spec: &ExperimentSpec) -> Vec<Target> {
    let iapam = spec.iapam();
    all_targets(spec)
        .into_iter()
        .filter(|t| iapam.is_important(t.weight_index))
        .collect()
}

/// Full realignment campaign: simulate every experiment, strip ground truth
/// for classification, attack the aligned rows.
pub fn circumvent(
    spec: &ExperimentSpec,
    lib: &PatternLibrary,
    cfg: &MatchConfig,
    targets: &[Target],
    schedule: &[usize],
) -> Result<(Vec<TargetResult>, Vec<CircumventionStats>), PipelineError> {
    let neurons = spec.neurons()?;
    let mut all_runs = Vec::new();
    let mut stats = Vec::new();
    let class_lib = classification_library(lib, spec.sim.variant);
    for e in 0..spec.experiment_count {
        let sim = spec.sim_config(e);
        let images = spec.images(e)?;
        let (mut traces, _) = Simulator::new(&neurons, &sim, lib)?.run(&images)?;
        let truth: Vec<Vec<ImportanceLabel>> = traces
            .traces
            .iter_mut()
            .map(|t| t.ground_truth.take().unwrap_or_default())
            .collect();
        let seqs = classify_set(&traces, &class_lib, cfg);
        let (errors, total) = seqs.iter().zip(&truth).fold((0, 0), |(e, n), (s, t)| {
            (e + crate::patterns::label_errors(&s.labels(), t), n + t.len())
        });
        let (runs, views) = circumvent_experiment(&traces, &seqs, &images, &neurons, targets, schedule)?;
        stats.push(CircumventionStats {
            experiment: e,
            label_error_rate: Some(errors as f64 / total.max(1) as f64),
            retained_fraction: views.iter().map(|v| v.partition.retained_fraction()).collect(),
        });
        all_runs.push(runs);
    }
    let results = merge_runs(targets, &neurons, &spec.iapam(), schedule, all_runs)?;
    Ok((results, stats))
}

/// IaPAM recovered from control-flow-free classifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CffReport {
    pub derived: Iapam,
    pub truth: Iapam,
    /// Non-important positions reported important.
    pub false_positive_bits: usize,
    /// Important positions reported non-important (only possible with
    /// misclassification).
    pub false_negative_bits: usize,
    /// Smallest number of traces whose classifications already give the true
    /// map, if the supplied traces suffice.
    pub traces_for_exact_recovery: Option<usize>,
    pub trace_count: usize,
}

/// Derives the IaPAM from the classification of every neuron of every trace
/// (neurons share one map).
pub fn cff_study(seqs: &[ClassifiedSequence], pixel_count: usize, truth: &Iapam) -> Result<CffReport, PipelineError> {
    if seqs.is_empty() {
        return Err(PreprocessError::Empty.into());
    }
    let mut views = Vec::new();
    // first_skip[i]: first trace in which position i was seen skipped.
    let mut first_skip: Vec<Option<usize>> = vec![None; pixel_count];
    for (n, seq) in seqs.iter().enumerate() {
        if seq.is_empty() || seq.len() % pixel_count != 0 {
            return Err(PreprocessError::MalformedClassification {
                index: n,
                expected: pixel_count,
                got: seq.len(),
            }
            .into());
        }
        for k in 0..seq.len() / pixel_count {
            let view = seq.neuron(k, pixel_count).unwrap_or_default();
            for (i, e) in view.entries.iter().enumerate() {
                if e.label == ImportanceLabel::Skipped && first_skip[i].is_none() {
                    first_skip[i] = Some(n);
                }
            }
            views.push(view);
        }
    }
    let derived = derive_iapam(&views)?;
    let false_positive_bits = (0..pixel_count)
        .filter(|&i| derived.is_important(i) && !truth.is_important(i))
        .count();
    let false_negative_bits = (0..pixel_count)
        .filter(|&i| !derived.is_important(i) && truth.is_important(i))
        .count();
    let traces_for_exact_recovery = if false_negative_bits == 0 && false_positive_bits == 0 {
        (0..pixel_count)
            .filter(|&i| !truth.is_important(i))
            .map(|i| first_skip[i].map(|n| n + 1))
            .try_fold(1usize, |acc, n| n.map(|n| acc.max(n)))
    } else {
        None
    };
    Ok(CffReport {
        derived,
        truth: truth.clone(),
        false_positive_bits,
        false_negative_bits,
        traces_for_exact_recovery,
        trace_count: seqs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::parse_labels;
    use crate::patterns::Entry;

    #[test]
    fn default_spec_round_trips_through_toml() {
        let spec = ExperimentSpec::default();
        let text = spec.to_toml_string().unwrap();
        assert_eq!(ExperimentSpec::from_toml_str(&text).unwrap(), spec);
        assert_eq!(ExperimentSpec::from_toml_str("").unwrap(), spec);
    }

    #[test]
    fn spec_validation() {
        assert!(ExperimentSpec::from_toml_str("experiment_count = 0").is_err());
        assert!(ExperimentSpec::from_toml_str("[attack]\ntargets = [0]").is_err());
        assert!(ExperimentSpec::from_toml_str("[sim]\nactivation_ratio = 1.5").is_err());
        assert!(ExperimentSpec::from_toml_str("[sim]\niapam = \"0101\"").is_err());
        assert!(ExperimentSpec::from_toml_str("bogus = 1").is_err());
        let spec = ExperimentSpec::from_toml_str("[sim]\nvariant = \"branched_mac_pruning\"").unwrap();
        assert_eq!(spec.sim.variant, Variant::Branched);
    }

    #[test]
    fn hash_tracks_simulation_fields_only() {
        let a = ExperimentSpec::default();
        let mut b = a.clone();
        b.attack.targets = vec![1];
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.sim.noise_sigma = 1.0;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
        assert_eq!(a.config_hash().unwrap().len(), 64);
    }

    #[test]
    fn experiment_seeds_differ() {
        let spec = ExperimentSpec::default();
        assert_ne!(spec.sim_config(0).rng_seed, spec.sim_config(1).rng_seed);
        assert_ne!(spec.images_n(0, 4).unwrap(), spec.images_n(1, 4).unwrap());
        assert_eq!(
            spec.images_n(0, 4).unwrap().image(3),
            spec.images_n(0, 10).unwrap().image(3)
        );
    }

    #[test]
    fn nominal_layout() {
        assert_eq!(nominal_window(33, 12), 396..408);
        let lib = PatternLibrary::reference();
        assert_eq!(processed_segment_len(&lib, Variant::Branched).unwrap(), 12);
    }

    fn seq(labels: &str) -> ClassifiedSequence {
        ClassifiedSequence {
            entries: parse_labels(labels)
                .unwrap()
                .into_iter()
                .map(|label| Entry {
                    start: 0,
                    label,
                    length: 1,
                })
                .collect(),
            unmatched_samples: 0,
        }
    }

    #[test]
    fn cff_worked_example() {
        let truth: Iapam = "011000110".parse().unwrap();
        let seqs = vec![seq("EEESSEEES"), seq("SEEESSEEE")];
        let report = cff_study(&seqs, 9, &truth).unwrap();
        assert_eq!(report.derived.to_string(), "011000110");
        assert_eq!(report.false_positive_bits, 0);
        assert_eq!(report.traces_for_exact_recovery, Some(2));

        let one = cff_study(&seqs[..1], 9, &truth).unwrap();
        assert_eq!(one.derived.to_string(), "111001110");
        assert_eq!(one.false_positive_bits, 2);
        assert_eq!(one.traces_for_exact_recovery, None);
    }

    #[test]
    fn small_raw_attack_recovers_weights_without_noise() {
        let mut spec = ExperimentSpec {
            experiment_count: 1,
            trace_count: 300,
            ..ExperimentSpec::default()
        };
        spec.layer.neuron_count = 2;
        spec.sim.noise_sigma = 0.0;
        spec.sim.variant = Variant::Unprotected;
        let targets = all_targets(&spec);
        let schedule = spec.schedule(300);
        let results = raw_attack(&spec, &PatternLibrary::reference(), &targets, &schedule, usize::MAX).unwrap();
        for r in &results {
            assert_eq!(r.curve.final_ge(), Some(0.0), "{:?}", r.target);
            assert_eq!(r.best, vec![r.true_weight]);
        }
    }
}
