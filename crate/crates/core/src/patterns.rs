// SPDX-License-Identifier: Apache-2.0

//! Pattern templates and sliding-window MAC classification.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, PatternError};
use crate::label::ImportanceLabel;
use crate::leakage::{Trace, TraceSet};

/// Reference baselines. Lengths: I and E share one length so the nominal
/// position of MAC #i is known without the IaPAM; S is shorter. The shapes
/// were picked offline to keep every cross-template score (including windows
/// straddling a segment boundary) negative at zero noise. Amplitudes are
/// large next to the data-dependent leak (at most 32, or 64 with extended
/// leakage): instruction shape dominates a real power trace, and it is this
/// shape that a misaligned trace smears over the attack window.
const REFERENCE_IMPORTANT: [f64; 12] = [80., 340., 85., 450., 60., 130., 75., 10., 305., 340., 405., 210.];
const REFERENCE_EXECUTED: [f64; 12] = [115., 210., 60., 285., 135., 425., 455., 430., 165., 105., 50., 150.];
const REFERENCE_SKIPPED: [f64; 6] = [460., 15., 345., 85., 395., 55.];
const REFERENCE_LEAK_OFFSET: usize = 5;

/// Fixed-length reference pattern for one importance label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTemplate {
    pub label: ImportanceLabel,
    pub samples: Vec<f64>,
    /// Sample where the simulator injects data-dependent leakage. `None` for
    /// patterns that carry no data.
    pub leak_offset: Option<usize>,
}

impl PatternTemplate {
    pub fn new(label: ImportanceLabel, samples: Vec<f64>, leak_offset: Option<usize>) -> Result<Self, ConfigError> {
        if samples.is_empty() {
            return Err(ConfigError::EmptyTemplate(label));
        }
        if let Some(offset) = leak_offset {
            if offset >= samples.len() {
                return Err(ConfigError::LeakOffset {
                    label,
                    offset,
                    len: samples.len(),
                });
            }
        }
        Ok(Self {
            label,
            samples,
            leak_offset,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// At most one template per label. Branched traces need all three; the
/// control-flow-free variant only needs E and S.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatternLibrary {
    slots: [Option<PatternTemplate>; 3],
}

impl PatternLibrary {
    pub fn new(templates: Vec<PatternTemplate>) -> Result<Self, ConfigError> {
        let mut lib = Self::default();
        for t in templates {
            let slot = &mut lib.slots[usize::from(t.label.code())];
            if slot.is_some() {
                return Err(ConfigError::DuplicateTemplate(t.label));
            }
            *slot = Some(t);
        }
        Ok(lib)
    }

    /// Noise-free baselines of the simulated platform.
    pub fn reference() -> Self {
        let make = |label, samples: &[f64], leak| PatternTemplate {
            label,
            samples: samples.to_vec(),
            leak_offset: leak,
        };
        Self {
            slots: [
                Some(make(
                    ImportanceLabel::Important,
                    &REFERENCE_IMPORTANT,
                    Some(REFERENCE_LEAK_OFFSET),
                )),
                Some(make(
                    ImportanceLabel::Executed,
                    &REFERENCE_EXECUTED,
                    Some(REFERENCE_LEAK_OFFSET),
                )),
                Some(make(ImportanceLabel::Skipped, &REFERENCE_SKIPPED, None)),
            ],
        }
    }

    /// The same library restricted to `labels`.
    pub fn restricted(&self, labels: &[ImportanceLabel]) -> Self {
        let mut lib = Self::default();
        for &l in labels {
            lib.slots[usize::from(l.code())] = self.get(l).cloned();
        }
        lib
    }

    pub fn get(&self, label: ImportanceLabel) -> Option<&PatternTemplate> {
        self.slots[usize::from(label.code())].as_ref()
    }

    pub fn require(&self, label: ImportanceLabel) -> Result<&PatternTemplate, ConfigError> {
        self.get(label).ok_or(ConfigError::MissingTemplate(label))
    }

    /// Templates in tie-break preference order (I, E, S).
    pub fn iter(&self) -> impl Iterator<Item = &PatternTemplate> + '_ {
        self.slots.iter().flatten()
    }

    pub fn max_len(&self) -> usize {
        self.iter().map(PatternTemplate::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Pearson correlation between slice and template, in [-1, 1].
    #[default]
    NormalizedCrossCorrelation,
    /// Minus the Euclidean distance, in (-inf, 0].
    NegativeEuclidean,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NormalizedCrossCorrelation => "normalized_cross_correlation",
            Self::NegativeEuclidean => "negative_euclidean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub threshold: f64,
    #[serde(default)]
    pub metric: Metric,
}

impl MatchConfig {
    pub fn new(threshold: f64, metric: Metric) -> Result<Self, ConfigError> {
        let cfg = Self { threshold, metric };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = match self.metric {
            Metric::NormalizedCrossCorrelation => (-1.0..=1.0).contains(&self.threshold),
            Metric::NegativeEuclidean => self.threshold <= 0.0 && self.threshold.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Threshold {
                threshold: self.threshold,
                metric: self.metric.to_string(),
            })
        }
    }
}

/// Similarity between a trace slice and a template of the same length.
pub fn similarity(slice: &[f32], template: &PatternTemplate, metric: Metric) -> Result<f64, PatternError> {
    if slice.len() != template.len() {
        return Err(PatternError::LengthMismatch {
            slice: slice.len(),
            template: template.len(),
        });
    }
    Ok(match metric {
        Metric::NormalizedCrossCorrelation => ncc(slice, &template.samples),
        Metric::NegativeEuclidean => -slice
            .iter()
            .zip(&template.samples)
            .map(|(&s, &t)| (f64::from(s) - t).powi(2))
            .sum::<f64>()
            .sqrt(),
    })
}

/// Pearson correlation; 0 when either side is constant.
fn ncc(slice: &[f32], template: &[f64]) -> f64 {
    let n = slice.len() as f64;
    let mean_s = slice.iter().map(|&s| f64::from(s)).sum::<f64>() / n;
    let mean_t = template.iter().sum::<f64>() / n;
    let (mut st, mut ss, mut tt) = (0.0, 0.0, 0.0);
    for (&s, &t) in slice.iter().zip(template) {
        let ds = f64::from(s) - mean_s;
        let dt = t - mean_t;
        st += ds * dt;
        ss += ds * ds;
        tt += dt * dt;
    }
    let denom = (ss * tt).sqrt();
    if denom > 0.0 {
        (st / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub start: usize,
    pub label: ImportanceLabel,
    pub length: usize,
}

impl Entry {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Output of the sliding-window matcher: matched segments in trace order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassifiedSequence {
    pub entries: Vec<Entry>,
    /// Samples stepped over one at a time because nothing matched.
    pub unmatched_samples: usize,
}

impl ClassifiedSequence {
    pub fn labels(&self) -> Vec<ImportanceLabel> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ordinal positions of the entries labelled important.
    pub fn important_positions(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| (e.label == ImportanceLabel::Important).then_some(i))
            .collect()
    }

    /// Entries of neuron `neuron` in a layer trace of `pixel_count` MACs per
    /// neuron. Sample offsets stay relative to the full trace.
    pub fn neuron(&self, neuron: usize, pixel_count: usize) -> Option<ClassifiedSequence> {
        let start = neuron * pixel_count;
        let end = start + pixel_count;
        (end <= self.entries.len()).then(|| ClassifiedSequence {
            entries: self.entries[start..end].to_vec(),
            unmatched_samples: 0,
        })
    }
}

/// Sliding-window classification of one trace.
///
/// At sample `s` every template whose length fits in the remaining trace is
/// scored against `trace[s..s + len]`. The best score wins (ties go I, then E,
/// then S); if it reaches the threshold the segment is recorded and `s` jumps
/// past it, otherwise `s` advances by one sample.
pub fn classify_samples(samples: &[f32], lib: &PatternLibrary, cfg: &MatchConfig) -> ClassifiedSequence {
    let mut out = ClassifiedSequence::default();
    let mut s = 0;
    while s < samples.len() {
        let mut best: Option<(f64, &PatternTemplate)> = None;
        for template in lib.iter() {
            let Some(slice) = samples.get(s..s + template.len()) else {
                continue;
            };
            let Ok(score) = similarity(slice, template, cfg.metric) else {
                continue;
            };
            if best.map_or(true, |(b, _)| score > b) {
                best = Some((score, template));
            }
        }
        match best {
            Some((score, template)) if score >= cfg.threshold => {
                out.entries.push(Entry {
                    start: s,
                    label: template.label,
                    length: template.len(),
                });
                s += template.len();
            }
            _ => {
                out.unmatched_samples += 1;
                s += 1;
            }
        }
    }
    out
}

/// Classifies a trace from its samples alone.
pub fn classify_trace(trace: &Trace, lib: &PatternLibrary, cfg: &MatchConfig) -> ClassifiedSequence {
    classify_samples(&trace.samples, lib, cfg)
}

pub fn classify_set(traces: &TraceSet, lib: &PatternLibrary, cfg: &MatchConfig) -> Vec<ClassifiedSequence> {
    traces.traces.par_iter().map(|t| classify_trace(t, lib, cfg)).collect()
}

/// Per-MAC label errors of a classification against ground truth: positional
/// mismatches plus entries missing from or surplus to the true sequence.
pub fn label_errors(predicted: &[ImportanceLabel], truth: &[ImportanceLabel]) -> usize {
    let mismatched = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    mismatched + predicted.len().abs_diff(truth.len())
}

/// Threshold grid swept by [`calibrate_templates`].
///
/// NCC: -1.00 to 1.00 in steps of 0.01. Negative Euclidean: 201 evenly spaced
/// values from minus twice the largest template norm up to 0.
pub fn threshold_grid(lib: &PatternLibrary, metric: Metric) -> Vec<f64> {
    match metric {
        Metric::NormalizedCrossCorrelation => (0..=200).map(|j| -1.0 + f64::from(j) * 0.01).collect(),
        Metric::NegativeEuclidean => {
            let norm = lib
                .iter()
                .map(|t| t.samples.iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            (0..=200).map(|j| -2.0 * norm * f64::from(200 - j) / 200.0).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub config: MatchConfig,
    pub error_rate: f64,
}

/// Sweeps [`threshold_grid`] and keeps the threshold with the lowest per-MAC
/// label error on ground-truth traces. Among equally good thresholds the
/// middle of the first longest run is chosen, which keeps the pick away from
/// the edges of the working range.
pub fn calibrate_templates(
    training: &TraceSet,
    lib: &PatternLibrary,
    cfg: &MatchConfig,
) -> Result<Calibration, PatternError> {
    if training.is_empty() {
        return Err(PatternError::EmptyTrainingSet);
    }
    let truths = training
        .iter()
        .enumerate()
        .map(|(n, t)| t.ground_truth.as_deref().ok_or(PatternError::MissingGroundTruth(n)))
        .collect::<Result<Vec<_>, _>>()?;
    let total: usize = truths.iter().map(|t| t.len()).sum();

    let grid = threshold_grid(lib, cfg.metric);
    let errors: Vec<usize> = grid
        .par_iter()
        .map(|&threshold| {
            let probe = MatchConfig {
                threshold,
                metric: cfg.metric,
            };
            training
                .iter()
                .zip(&truths)
                .map(|(t, truth)| label_errors(&classify_trace(t, lib, &probe).labels(), truth))
                .sum()
        })
        .collect();

    let best = errors.iter().copied().min().unwrap_or(0);
    let (mut run_start, mut run_len) = (0, 0);
    let mut i = 0;
    while i < errors.len() {
        if errors[i] == best {
            let start = i;
            while i < errors.len() && errors[i] == best {
                i += 1;
            }
            if i - start > run_len {
                run_start = start;
                run_len = i - start;
            }
        } else {
            i += 1;
        }
    }
    let chosen = grid[run_start + (run_len - 1) / 2];
    Ok(Calibration {
        config: MatchConfig::new(chosen, cfg.metric)?,
        error_rate: best as f64 / total.max(1) as f64,
    })
}

/// Averaged templates estimated from ground-truth segments of training
/// traces. Segment boundaries come from the template lengths in `lib`;
/// leakage offsets are carried over.
pub fn estimate_templates(training: &TraceSet, lib: &PatternLibrary) -> Result<PatternLibrary, PatternError> {
    if training.is_empty() {
        return Err(PatternError::EmptyTrainingSet);
    }
    let mut sums: Vec<(Vec<f64>, usize)> = ImportanceLabel::PREFERENCE
        .iter()
        .map(|&l| (vec![0.0; lib.get(l).map_or(0, PatternTemplate::len)], 0))
        .collect();
    for (n, trace) in training.iter().enumerate() {
        let truth = trace
            .ground_truth
            .as_deref()
            .ok_or(PatternError::MissingGroundTruth(n))?;
        let mut pos = 0;
        for &label in truth {
            let len = lib.require(label)?.len();
            let (sum, count) = &mut sums[usize::from(label.code())];
            for (acc, &s) in sum.iter_mut().zip(&trace.samples[pos..pos + len]) {
                *acc += f64::from(s);
            }
            *count += 1;
            pos += len;
        }
    }
    let templates = ImportanceLabel::PREFERENCE
        .iter()
        .zip(sums)
        .filter(|(_, (_, count))| *count > 0)
        .map(|(&label, (sum, count))| {
            let leak = lib.get(label).and_then(|t| t.leak_offset);
            PatternTemplate::new(label, sum.into_iter().map(|s| s / count as f64).collect(), leak)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PatternLibrary::new(templates)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{format_labels, parse_labels};

    fn ncc_cfg(threshold: f64) -> MatchConfig {
        MatchConfig::new(threshold, Metric::NormalizedCrossCorrelation).unwrap()
    }

    fn concat(lib: &PatternLibrary, labels: &str) -> Vec<f32> {
        parse_labels(labels)
            .unwrap()
            .into_iter()
            .flat_map(|l| lib.require(l).unwrap().samples.clone())
            .map(|v| v as f32)
            .collect()
    }

    #[test]
    fn self_similarity_is_one() {
        let lib = PatternLibrary::reference();
        for t in lib.iter() {
            let slice: Vec<f32> = t.samples.iter().map(|&v| v as f32).collect();
            let s = similarity(&slice, t, Metric::NormalizedCrossCorrelation).unwrap();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(similarity(&slice, t, Metric::NegativeEuclidean).unwrap(), 0.0);
        }
    }

    #[test]
    fn ncc_ignores_affine_amplitude_changes() {
        let t = PatternLibrary::reference()
            .require(ImportanceLabel::Executed)
            .unwrap()
            .clone();
        let slice: Vec<f32> = t.samples.iter().map(|&v| (2.0 * v + 5.0) as f32).collect();
        let s = similarity(&slice, &t, Metric::NormalizedCrossCorrelation).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn euclidean_single_perturbation() {
        let t = PatternLibrary::reference()
            .require(ImportanceLabel::Skipped)
            .unwrap()
            .clone();
        let mut slice: Vec<f32> = t.samples.iter().map(|&v| v as f32).collect();
        slice[2] += 0.75;
        let s = similarity(&slice, &t, Metric::NegativeEuclidean).unwrap();
        assert!((s + 0.75).abs() < 1e-6, "{s}");
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let t = PatternLibrary::reference()
            .require(ImportanceLabel::Skipped)
            .unwrap()
            .clone();
        assert!(matches!(
            similarity(&[1.0; 5], &t, Metric::NegativeEuclidean),
            Err(PatternError::LengthMismatch { slice: 5, template: 6 })
        ));
    }

    #[test]
    fn reference_templates_are_separable() {
        // Every wrong template must score below every right one at zero noise,
        // including windows that run into the following segment.
        let lib = PatternLibrary::reference();
        for a in ImportanceLabel::PREFERENCE {
            for b in ImportanceLabel::PREFERENCE {
                let x = concat(&lib, &format!("{a}{b}SS"));
                for t in lib.iter().filter(|t| t.label != a) {
                    let s = similarity(&x[..t.len()], t, Metric::NormalizedCrossCorrelation).unwrap();
                    assert!(s < 0.0, "{} on {a}{b}: {s}", t.label);
                }
            }
        }
    }

    #[test]
    fn classifies_concatenated_templates() {
        let lib = PatternLibrary::reference();
        let samples = concat(&lib, "SEIESSIIS");
        let seq = classify_samples(&samples, &lib, &ncc_cfg(0.9));
        assert_eq!(format_labels(&seq.labels()), "SEIESSIIS");
        assert_eq!(seq.unmatched_samples, 0);

        let seq = classify_samples(&concat(&lib, "III"), &lib, &ncc_cfg(0.9));
        assert_eq!(format_labels(&seq.labels()), "III");
        assert_eq!(seq.entries[1].start, 12);
    }

    #[test]
    fn unmatched_prefix_is_stepped_over() {
        let lib = PatternLibrary::reference();
        let mut samples = vec![50.0f32; 3];
        samples.extend(concat(&lib, "EI"));
        let seq = classify_samples(&samples, &lib, &ncc_cfg(0.9));
        assert_eq!(format_labels(&seq.labels()), "EI");
        assert_eq!(seq.unmatched_samples, 3);
        assert_eq!(seq.entries[0].start, 3);
    }

    #[test]
    fn short_tail_only_scores_fitting_templates() {
        let lib = PatternLibrary::reference();
        // Six samples left: only S fits.
        let seq = classify_samples(&concat(&lib, "S"), &lib, &ncc_cfg(0.9));
        assert_eq!(format_labels(&seq.labels()), "S");
    }

    #[test]
    fn ties_prefer_important() {
        // Two identical templates of the same length: I must win.
        let base = vec![1.0, 5.0, 2.0, 8.0];
        let lib = PatternLibrary::new(vec![
            PatternTemplate::new(ImportanceLabel::Skipped, base.clone(), None).unwrap(),
            PatternTemplate::new(ImportanceLabel::Important, base.clone(), None).unwrap(),
            PatternTemplate::new(ImportanceLabel::Executed, base.clone(), None).unwrap(),
        ])
        .unwrap();
        let samples: Vec<f32> = base.iter().map(|&v| v as f32).collect();
        let seq = classify_samples(&samples, &lib, &ncc_cfg(0.5));
        assert_eq!(seq.labels(), vec![ImportanceLabel::Important]);
    }

    #[test]
    fn threshold_validation() {
        assert!(MatchConfig::new(1.5, Metric::NormalizedCrossCorrelation).is_err());
        assert!(MatchConfig::new(0.5, Metric::NegativeEuclidean).is_err());
        assert!(MatchConfig::new(-3.0, Metric::NegativeEuclidean).is_ok());
    }

    #[test]
    fn label_error_counts_length_differences() {
        let t = parse_labels("SEI").unwrap();
        assert_eq!(label_errors(&t, &t), 0);
        assert_eq!(label_errors(&parse_labels("SE").unwrap(), &t), 1);
        assert_eq!(label_errors(&parse_labels("EEIS").unwrap(), &t), 2);
    }

    #[test]
    fn duplicate_templates_rejected() {
        let t = PatternTemplate::new(ImportanceLabel::Skipped, vec![1.0, 2.0], None).unwrap();
        assert!(PatternLibrary::new(vec![t.clone(), t]).is_err());
        assert!(PatternTemplate::new(ImportanceLabel::Executed, vec![1.0], Some(1)).is_err());
    }
}
