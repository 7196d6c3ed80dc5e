// SPDX-License-Identifier: Apache-2.0

//! Power-trace synthesis for the first layer of a quantized MLP running with
//! (or without) MAC pruning.
//!
//! Every MAC emits one pattern template chosen by its importance label. Executed
//! MACs add the Hamming weight of the running accumulator at the template's
//! leakage offset, and the whole trace receives additive Gaussian noise. The
//! neurons of a layer run back to back, so one trace covers
//! `neurons × pixel_count` MACs in raster order.
//!
//! Randomness is split into two independent ChaCha streams per trace: one for
//! the skip decisions and one for the noise. Both are keyed by
//! `(rng_seed, trace_index)`, so a trace can be regenerated in isolation and
//! parallel runs match serial runs bit for bit.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::label::ImportanceLabel;
use crate::patterns::PatternLibrary;

/// Domain separator between the noise and skip-decision streams.
const SKIP_STREAM_DOMAIN: u64 = 0x5348_4950_5441_424c;

/// First nine IaPAM bits of the reference configuration (weights w0..w8).
pub const REFERENCE_IAPAM_PREFIX: [bool; 9] = [false, true, true, true, true, false, true, false, true];

/// Hamming weight of the 32-bit two's-complement representation.
#[inline]
pub fn hamming_weight(value: i32) -> u32 {
    (value as u32).count_ones()
}

/// Importance-aware pixel activation map. A set bit marks an important pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Iapam {
    bits: Vec<bool>,
}

impl Iapam {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_important(pixel_count: usize) -> Self {
        Self::new(vec![true; pixel_count])
    }

    /// The reference map: the nine documented bits repeated cyclically up to
    /// `pixel_count` positions.
    pub fn reference(pixel_count: usize) -> Self {
        Self::new(
            REFERENCE_IAPAM_PREFIX
                .iter()
                .copied()
                .cycle()
                .take(pixel_count)
                .collect(),
        )
    }

    pub fn from_positions(pixel_count: usize, important: &[usize]) -> Self {
        let mut bits = vec![false; pixel_count];
        for &i in important {
            bits[i] = true;
        }
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_important(&self, pixel: usize) -> bool {
        self.bits[pixel]
    }

    pub fn important_positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn important_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl fmt::Display for Iapam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Iapam {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .filter(|c| !c.is_whitespace() && *c != ',' && *c != '_')
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(ConfigError::IapamSyntax(s.to_owned())),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self::new)
    }
}

impl From<Iapam> for String {
    fn from(map: Iapam) -> Self {
        map.to_string()
    }
}

impl TryFrom<String> for Iapam {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// One first-layer neuron: `y = σ(Σ xᵢ·wᵢ) + b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub weights: Vec<i8>,
    #[serde(default)]
    pub bias: i32,
}

impl NeuronConfig {
    pub fn new(weights: Vec<i8>, bias: i32) -> Result<Self, ConfigError> {
        let neuron = Self { weights, bias };
        neuron.validate()?;
        Ok(neuron)
    }

    /// Weights drawn uniformly over the full signed 8-bit range.
    pub fn random(pixel_count: usize, seed: u64) -> Result<Self, ConfigError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new((0..pixel_count).map(|_| rng.random::<i8>()).collect(), 0)
    }

    pub fn pixel_count(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.weights.is_empty() {
            return Err(ConfigError::EmptyNeuron);
        }
        Ok(())
    }
}

/// A deterministic layer of `count` random neurons, each seeded from `seed`.
pub fn random_layer(count: usize, pixel_count: usize, seed: u64) -> Result<Vec<NeuronConfig>, ConfigError> {
    (0..count as u64)
        .map(|k| NeuronConfig::random(pixel_count, derive_seed(seed, k)))
        .collect()
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No pruning: every MAC runs the executed-MAC code path.
    Unprotected,
    /// Pruning with a branch on importance: I, E and S paths all differ.
    #[serde(alias = "branched_mac_pruning")]
    Branched,
    /// Pruning through a function-pointer select: important MACs share the
    /// executed path, so only executed vs. skipped is visible.
    ControlFlowFree,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unprotected => "unprotected",
            Self::Branched => "branched",
            Self::ControlFlowFree => "control_flow_free",
        })
    }
}

/// Simulation parameters.
///
/// `activation_ratio` is the probability that a non-important MAC is
/// *skipped*; at the worst-case value 0.5 the two possible readings of the
/// name coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub iapam: Iapam,
    pub activation_ratio: f64,
    pub noise_sigma: f64,
    /// Also leak HW(a_{i-1}) during MAC #i.
    #[serde(default)]
    pub extended_leakage: bool,
    pub variant: Variant,
    pub rng_seed: u64,
}

impl SimConfig {
    pub fn validate(&self, pixel_count: usize) -> Result<(), ConfigError> {
        if pixel_count == 0 {
            return Err(ConfigError::EmptyNeuron);
        }
        if self.iapam.len() != pixel_count {
            return Err(ConfigError::IapamLength {
                expected: pixel_count,
                got: self.iapam.len(),
            });
        }
        if !(0.0..=1.0).contains(&self.activation_ratio) {
            return Err(ConfigError::ActivationRatio(self.activation_ratio));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(ConfigError::NoiseSigma(self.noise_sigma));
        }
        Ok(())
    }

    /// Labels the template library must provide for this variant.
    pub fn required_labels(&self) -> &'static [ImportanceLabel] {
        match self.variant {
            Variant::Unprotected => &[ImportanceLabel::Executed],
            Variant::Branched => &ImportanceLabel::PREFERENCE,
            Variant::ControlFlowFree => &[ImportanceLabel::Executed, ImportanceLabel::Skipped],
        }
    }
}

/// Row-major matrix of 8-bit images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pixel_count: usize,
    pixels: Vec<u8>,
}

impl ImageSet {
    pub fn new(pixel_count: usize, pixels: Vec<u8>) -> Result<Self, ConfigError> {
        if pixel_count == 0 {
            return Err(ConfigError::EmptyNeuron);
        }
        if pixels.len() % pixel_count != 0 {
            return Err(ConfigError::Invalid(format!(
                "{} pixels do not split into images of {pixel_count}",
                pixels.len()
            )));
        }
        Ok(Self { pixel_count, pixels })
    }

    pub fn from_rows(pixel_count: usize, rows: &[Vec<u8>]) -> Result<Self, ConfigError> {
        let mut pixels = Vec::with_capacity(rows.len() * pixel_count);
        for row in rows {
            if row.len() != pixel_count {
                return Err(ConfigError::ImageLength {
                    expected: pixel_count,
                    got: row.len(),
                });
            }
            pixels.extend_from_slice(row);
        }
        Self::new(pixel_count, pixels)
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.pixel_count
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, n: usize) -> &[u8] {
        &self.pixels[n * self.pixel_count..(n + 1) * self.pixel_count]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [u8] {
        &mut self.pixels[n * self.pixel_count..(n + 1) * self.pixel_count]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[u8]> + '_ {
        self.pixels.chunks_exact(self.pixel_count)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.pixels
    }

    /// The images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.pixel_count);
        for &n in indices {
            pixels.extend_from_slice(self.image(n));
        }
        Self {
            pixel_count: self.pixel_count,
            pixels,
        }
    }
}

/// Uniform random 8-bit images, deterministic in `seed`.
pub fn generate_images(count: usize, pixel_count: usize, seed: u64) -> Result<ImageSet, ConfigError> {
    if count == 0 {
        return Err(ConfigError::NoImages);
    }
    if pixel_count == 0 {
        return Err(ConfigError::EmptyNeuron);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; count * pixel_count];
    rng.fill(pixels.as_mut_slice());
    ImageSet::new(pixel_count, pixels)
}

/// Per-inference execution decisions. A set bit means the MAC ran; bits at
/// important positions are always set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipTable {
    width: usize,
    decisions: Vec<bool>,
}

impl SkipTable {
    pub fn new(width: usize, decisions: Vec<bool>) -> Result<Self, ConfigError> {
        if width == 0 || decisions.len() % width != 0 {
            return Err(ConfigError::Invalid(format!(
                "{} decisions do not split into rows of {width}",
                decisions.len()
            )));
        }
        Ok(Self { width, decisions })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn trace_count(&self) -> usize {
        self.decisions.len() / self.width
    }

    pub fn row(&self, n: usize) -> &[bool] {
        &self.decisions[n * self.width..(n + 1) * self.width]
    }

    pub fn executed(&self, n: usize, mac: usize) -> bool {
        self.decisions[n * self.width + mac]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.decisions
    }
}

/// One simulated power measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<f32>,
    pub image_index: u32,
    /// Labels actually emitted, one per MAC. Kept for verification only; the
    /// attack path never reads it.
    pub ground_truth: Option<Vec<ImportanceLabel>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceSet {
    pub traces: Vec<Trace>,
}

impl TraceSet {
    pub fn new(traces: Vec<Trace>) -> Self {
        Self { traces }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trace> {
        self.traces.iter()
    }

    /// Common sample count, if every trace has the same length.
    pub fn fixed_length(&self) -> Option<usize> {
        let first = self.traces.first()?.samples.len();
        self.traces.iter().all(|t| t.samples.len() == first).then_some(first)
    }

    pub fn min_length(&self) -> usize {
        self.traces.iter().map(|t| t.samples.len()).min().unwrap_or(0)
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.traces.is_empty() && self.traces.iter().all(|t| t.ground_truth.is_some())
    }

    /// Attacker view: the same samples with every ground-truth record removed.
    pub fn strip_ground_truth(&mut self) {
        for t in &mut self.traces {
            t.ground_truth = None;
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&n| self.traces[n].clone()).collect())
    }
}

/// Validated simulator for a layer of neurons sharing one IaPAM.
#[derive(Debug, Clone, Copy)]
pub struct Simulator<'a> {
    neurons: &'a [NeuronConfig],
    sim: &'a SimConfig,
    templates: &'a PatternLibrary,
    pixel_count: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(
        neurons: &'a [NeuronConfig],
        sim: &'a SimConfig,
        templates: &'a PatternLibrary,
    ) -> Result<Self, ConfigError> {
        let first = neurons.first().ok_or(ConfigError::EmptyLayer)?;
        let pixel_count = first.pixel_count();
        for n in neurons {
            n.validate()?;
            if n.pixel_count() != pixel_count {
                return Err(ConfigError::RaggedLayer);
            }
        }
        sim.validate(pixel_count)?;
        for &label in sim.required_labels() {
            let t = templates.require(label)?;
            if label.is_processed() && t.leak_offset.is_none() {
                return Err(ConfigError::Invalid(format!("template {label} needs a leakage offset")));
            }
        }
        Ok(Self {
            neurons,
            sim,
            templates,
            pixel_count,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    /// Number of MACs per trace.
    pub fn mac_count(&self) -> usize {
        self.pixel_count * self.neurons.len()
    }

    /// Execution decisions for trace `trace_index`: non-important MACs are
    /// skipped with probability `activation_ratio`.
    pub fn skip_row(&self, trace_index: u64) -> Vec<bool> {
        let mut row = vec![true; self.mac_count()];
        if self.sim.variant == Variant::Unprotected {
            return row;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.sim.rng_seed ^ SKIP_STREAM_DOMAIN);
        rng.set_stream(trace_index);
        for (mac, executed) in row.iter_mut().enumerate() {
            if !self.sim.iapam.is_important(mac % self.pixel_count) {
                *executed = rng.random::<f64>() >= self.sim.activation_ratio;
            }
        }
        row
    }

    /// Label emitted for MAC `mac` under `skip_row`.
    fn emitted(&self, mac: usize, skip_row: &[bool]) -> ImportanceLabel {
        let important = self.sim.iapam.is_important(mac % self.pixel_count);
        match self.sim.variant {
            Variant::Unprotected => ImportanceLabel::Executed,
            Variant::Branched if important => ImportanceLabel::Important,
            Variant::ControlFlowFree if important => ImportanceLabel::Executed,
            _ if skip_row[mac] => ImportanceLabel::Executed,
            _ => ImportanceLabel::Skipped,
        }
    }

    /// Synthesizes one trace. `skip_row` has one entry per MAC of the layer.
    pub fn trace(&self, image: &[u8], skip_row: &[bool], trace_index: u64) -> Result<Trace, ConfigError> {
        if image.len() != self.pixel_count {
            return Err(ConfigError::ImageLength {
                expected: self.pixel_count,
                got: image.len(),
            });
        }
        if skip_row.len() != self.mac_count() {
            return Err(ConfigError::SkipRowLength {
                expected: self.mac_count(),
                got: skip_row.len(),
            });
        }

        let mut samples: Vec<f64> = Vec::new();
        let mut labels = Vec::with_capacity(self.mac_count());
        for (k, neuron) in self.neurons.iter().enumerate() {
            let mut acc: i32 = 0;
            for (i, (&x, &w)) in image.iter().zip(&neuron.weights).enumerate() {
                let label = self.emitted(k * self.pixel_count + i, skip_row);
                let template = self.templates.require(label)?;
                let start = samples.len();
                samples.extend_from_slice(&template.samples);
                if label.is_processed() {
                    let previous = acc;
                    acc = acc.wrapping_add(i32::from(x) * i32::from(w));
                    let mut leak = hamming_weight(acc);
                    if self.sim.extended_leakage {
                        leak += hamming_weight(previous);
                    }
                    // Checked in `new` for every processed label.
                    let offset = template.leak_offset.unwrap_or(0);
                    samples[start + offset] += f64::from(leak);
                }
                labels.push(label);
            }
        }

        if self.sim.noise_sigma > 0.0 {
            let normal =
                Normal::new(0.0, self.sim.noise_sigma).map_err(|_| ConfigError::NoiseSigma(self.sim.noise_sigma))?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.sim.rng_seed);
            rng.set_stream(trace_index);
            for s in &mut samples {
                *s += normal.sample(&mut rng);
            }
        }

        Ok(Trace {
            samples: samples.into_iter().map(|s| s as f32).collect(),
            image_index: u32::try_from(trace_index).unwrap_or(u32::MAX),
            ground_truth: Some(labels),
        })
    }

    /// Simulates traces for `range` of the image set; trace `n` uses image `n`
    /// and its own skip row.
    pub fn run_range(&self, images: &ImageSet, range: Range<usize>) -> Result<(TraceSet, SkipTable), ConfigError> {
        if images.pixel_count() != self.pixel_count {
            return Err(ConfigError::ImageLength {
                expected: self.pixel_count,
                got: images.pixel_count(),
            });
        }
        if range.end > images.len() {
            return Err(ConfigError::Invalid(format!(
                "trace range {range:?} exceeds {} images",
                images.len()
            )));
        }
        let rows: Vec<(Trace, Vec<bool>)> = range
            .into_par_iter()
            .map(|n| {
                let skip_row = self.skip_row(n as u64);
                let trace = self.trace(images.image(n), &skip_row, n as u64)?;
                Ok((trace, skip_row))
            })
            .collect::<Result<_, ConfigError>>()?;
        let mut traces = Vec::with_capacity(rows.len());
        let mut decisions = Vec::with_capacity(rows.len() * self.mac_count());
        for (t, row) in rows {
            traces.push(t);
            decisions.extend(row);
        }
        Ok((TraceSet::new(traces), SkipTable::new(self.mac_count(), decisions)?))
    }

    pub fn run(&self, images: &ImageSet) -> Result<(TraceSet, SkipTable), ConfigError> {
        if images.is_empty() {
            return Err(ConfigError::NoImages);
        }
        self.run_range(images, 0..images.len())
    }
}

/// Single-neuron trace; see [`Simulator::trace`].
pub fn simulate_trace(
    neuron: &NeuronConfig,
    sim: &SimConfig,
    image: &[u8],
    skip_row: &[bool],
    templates: &PatternLibrary,
    trace_index: u64,
) -> Result<Trace, ConfigError> {
    Simulator::new(std::slice::from_ref(neuron), sim, templates)?.trace(image, skip_row, trace_index)
}

/// One trace per image for a single neuron, plus the skip table used.
pub fn simulate_experiment(
    neuron: &NeuronConfig,
    sim: &SimConfig,
    images: &ImageSet,
    templates: &PatternLibrary,
) -> Result<(TraceSet, SkipTable), ConfigError> {
    Simulator::new(std::slice::from_ref(neuron), sim, templates)?.run(images)
}

/// One trace per image for a whole layer executed neuron after neuron.
pub fn simulate_layer_experiment(
    neurons: &[NeuronConfig],
    sim: &SimConfig,
    images: &ImageSet,
    templates: &PatternLibrary,
) -> Result<(TraceSet, SkipTable), ConfigError> {
    Simulator::new(neurons, sim, templates)?.run(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{format_labels, parse_labels};

    fn branched(iapam: Iapam, p: f64, sigma: f64) -> SimConfig {
        SimConfig {
            iapam,
            activation_ratio: p,
            noise_sigma: sigma,
            extended_leakage: false,
            variant: Variant::Branched,
            rng_seed: 7,
        }
    }

    #[test]
    fn reference_iapam_prefix() {
        let map = Iapam::reference(32);
        assert_eq!(map.len(), 32);
        assert_eq!(&map.to_string()[..9], "011110101");
        assert_eq!(&map.to_string()[9..18], "011110101");
        assert_eq!("0111 1010 1".parse::<Iapam>().unwrap().to_string(), "011110101");
        assert!("01x".parse::<Iapam>().is_err());
    }

    #[test]
    fn hamming_weight_uses_twos_complement() {
        assert_eq!(hamming_weight(0), 0);
        assert_eq!(hamming_weight(-1), 32);
        assert_eq!(hamming_weight(i32::MIN), 1);
        assert_eq!(hamming_weight(0b1011), 3);
    }

    #[test]
    fn images_are_deterministic() {
        let a = generate_images(3, 4, 11).unwrap();
        let b = generate_images(3, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_ne!(a, generate_images(3, 4, 12).unwrap());
        assert!(generate_images(1, 0, 1).is_err());
        assert!(generate_images(0, 4, 1).is_err());
    }

    #[test]
    fn fifty_thousand_images_are_uniform() {
        let images = generate_images(50_000, 32, 3).unwrap();
        assert_eq!(images.len(), 50_000);
        assert_eq!(images.pixel_count(), 32);
        let mean = images.as_bytes().iter().map(|&p| f64::from(p)).sum::<f64>() / images.as_bytes().len() as f64;
        assert!((mean - 127.5).abs() < 0.5, "mean {mean}");
    }

    #[test]
    fn all_important_map_emits_only_important_patterns() {
        let lib = PatternLibrary::reference();
        let neuron = NeuronConfig::random(8, 1).unwrap();
        let sim = branched(Iapam::all_important(8), 0.5, 0.0);
        let t = simulate_trace(&neuron, &sim, &[9; 8], &[false; 8], &lib, 0).unwrap();
        assert!(t
            .ground_truth
            .as_ref()
            .unwrap()
            .iter()
            .all(|&l| l == ImportanceLabel::Important));
        assert_eq!(
            t.samples.len(),
            8 * lib.require(ImportanceLabel::Important).unwrap().len()
        );
    }

    #[test]
    fn reference_map_with_two_skips() {
        let lib = PatternLibrary::reference();
        let neuron = NeuronConfig::random(32, 1).unwrap();
        let sim = branched(Iapam::reference(32), 0.5, 0.0);
        let mut skip_row = vec![true; 32];
        skip_row[0] = false;
        skip_row[7] = false;
        let t = simulate_trace(&neuron, &sim, &[1; 32], &skip_row, &lib, 0).unwrap();
        let gt = t.ground_truth.unwrap();
        assert_eq!(format_labels(&gt[..9]), "SIIIIEISI");
        assert_eq!(gt[..9], parse_labels("SIIIIEISI").unwrap()[..]);
    }

    #[test]
    fn missing_template_is_a_configuration_error() {
        let lib = PatternLibrary::new(vec![PatternLibrary::reference()
            .require(ImportanceLabel::Executed)
            .unwrap()
            .clone()])
        .unwrap();
        let neuron = NeuronConfig::random(4, 1).unwrap();
        let sim = branched(Iapam::reference(4), 0.5, 0.0);
        let err = simulate_trace(&neuron, &sim, &[1; 4], &[true; 4], &lib, 0).unwrap_err();
        assert!(matches!(err, ConfigError::MissingTemplate(_)));
    }

    #[test]
    fn rejects_bad_configs() {
        let lib = PatternLibrary::reference();
        let neuron = NeuronConfig::random(4, 1).unwrap();
        let sim = branched(Iapam::reference(5), 0.5, 0.0);
        assert!(matches!(
            Simulator::new(std::slice::from_ref(&neuron), &sim, &lib),
            Err(ConfigError::IapamLength { .. })
        ));
        let sim = branched(Iapam::reference(4), 1.5, 0.0);
        assert!(Simulator::new(std::slice::from_ref(&neuron), &sim, &lib).is_err());
        let sim = branched(Iapam::reference(4), 0.5, -1.0);
        assert!(Simulator::new(std::slice::from_ref(&neuron), &sim, &lib).is_err());
        assert!(NeuronConfig::new(vec![], 0).is_err());
    }

    #[test]
    fn noisy_traces_are_reproducible() {
        let lib = PatternLibrary::reference();
        let neuron = NeuronConfig::random(16, 4).unwrap();
        let sim = branched(Iapam::reference(16), 0.5, 3.0);
        let images = generate_images(20, 16, 5).unwrap();
        let (a, sa) = simulate_experiment(&neuron, &sim, &images, &lib).unwrap();
        let (b, sb) = simulate_experiment(&neuron, &sim, &images, &lib).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        // Any sub-range regenerates the same traces.
        let sim_ref = Simulator::new(std::slice::from_ref(&neuron), &sim, &lib).unwrap();
        let (part, _) = sim_ref.run_range(&images, 5..9).unwrap();
        assert_eq!(part.traces[..], a.traces[5..9]);
    }

    #[test]
    fn activation_ratio_boundaries() {
        let lib = PatternLibrary::reference();
        let neuron = NeuronConfig::random(32, 4).unwrap();
        let images = generate_images(50, 32, 5).unwrap();
        let map = Iapam::reference(32);

        let (traces, table) = simulate_experiment(&neuron, &branched(map.clone(), 0.0, 0.0), &images, &lib).unwrap();
        assert!(table.as_slice().iter().all(|&b| b));
        assert!(traces.fixed_length().is_some());

        let (_, table) = simulate_experiment(&neuron, &branched(map.clone(), 1.0, 0.0), &images, &lib).unwrap();
        for n in 0..table.trace_count() {
            for i in 0..32 {
                assert_eq!(table.executed(n, i), map.is_important(i));
            }
        }
    }

    #[test]
    fn unprotected_traces_are_all_executed() {
        let lib = PatternLibrary::reference();
        let neurons = random_layer(2, 16, 9).unwrap();
        let sim = SimConfig {
            variant: Variant::Unprotected,
            ..branched(Iapam::reference(16), 0.5, 1.0)
        };
        let images = generate_images(30, 16, 5).unwrap();
        let (traces, _) = simulate_layer_experiment(&neurons, &sim, &images, &lib).unwrap();
        let e_len = lib.require(ImportanceLabel::Executed).unwrap().len();
        assert_eq!(traces.fixed_length(), Some(32 * e_len));
        for t in traces.iter() {
            assert!(t
                .ground_truth
                .as_ref()
                .unwrap()
                .iter()
                .all(|&l| l == ImportanceLabel::Executed));
        }
    }

    #[test]
    fn control_flow_free_hides_importance() {
        let lib = PatternLibrary::reference();
        let neuron = NeuronConfig::random(32, 4).unwrap();
        let sim = SimConfig {
            variant: Variant::ControlFlowFree,
            ..branched(Iapam::reference(32), 0.5, 0.0)
        };
        let images = generate_images(40, 32, 5).unwrap();
        let (traces, table) = simulate_experiment(&neuron, &sim, &images, &lib).unwrap();
        for (n, t) in traces.iter().enumerate() {
            for (i, &l) in t.ground_truth.as_ref().unwrap().iter().enumerate() {
                assert_ne!(l, ImportanceLabel::Important);
                assert_eq!(l == ImportanceLabel::Executed, table.executed(n, i));
            }
        }
    }
}
