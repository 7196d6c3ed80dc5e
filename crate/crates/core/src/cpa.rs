// SPDX-License-Identifier: Apache-2.0

//! Correlation power analysis on MAC accumulators and guessing-entropy
//! evaluation.
//!
//! To recover weight `w_i` the attacker knows `w_0..w_{i-1}`, predicts the
//! accumulator `a_i = a_{i-1} + w·x_i` for every candidate `w`, and ranks the
//! candidates by the largest absolute Pearson correlation between `HW(a_i)`
//! and the trace samples inside a window.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::AttackError;
use crate::label::ImportanceLabel;
use crate::leakage::{hamming_weight, ImageSet};
use crate::patterns::ClassifiedSequence;
use crate::preprocess::AlignedTraceSet;

/// Ordered, duplicate-free weight candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet(Vec<i8>);

impl CandidateSet {
    pub fn new(values: Vec<i8>) -> Result<Self, AttackError> {
        if values.is_empty() {
            return Err(AttackError::NoCandidates);
        }
        let mut seen = [false; 256];
        for &v in &values {
            let slot = &mut seen[usize::from(v as u8)];
            if *slot {
                return Err(AttackError::DuplicateCandidate(v));
            }
            *slot = true;
        }
        Ok(Self(values))
    }

    /// All 256 signed 8-bit values, ascending.
    pub fn all() -> Self {
        Self((i8::MIN..=i8::MAX).collect())
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for CandidateSet {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageModel {
    #[default]
    HammingWeight,
}

impl LeakageModel {
    #[inline]
    pub fn predict(self, accumulator: i32) -> f64 {
        match self {
            Self::HammingWeight => f64::from(hamming_weight(accumulator)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub candidates: CandidateSet,
    pub leakage_model: LeakageModel,
    /// Index `i ≥ 1` of the weight under attack.
    pub target_index: usize,
    /// Weights `w_0..w_{i-1}`, assumed already recovered. `w_0` itself is
    /// never a target but contributes to the accumulator.
    pub known_prefix: Vec<i8>,
    /// Sample ranges scanned for the maximum correlation.
    pub window: Vec<Range<usize>>,
}

impl AttackConfig {
    /// Attack on `w_i` of `weights`, using the true prefix.
    pub fn for_weight(weights: &[i8], target_index: usize, window: Vec<Range<usize>>) -> Self {
        Self {
            candidates: CandidateSet::all(),
            leakage_model: LeakageModel::HammingWeight,
            target_index,
            known_prefix: weights[..target_index.min(weights.len())].to_vec(),
            window,
        }
    }

    fn check(&self, pixel_count: usize) -> Result<(), AttackError> {
        if self.target_index == 0 || self.target_index >= pixel_count {
            return Err(AttackError::TargetOutOfRange {
                index: self.target_index,
                pixel_count,
            });
        }
        if self.known_prefix.len() < self.target_index {
            return Err(AttackError::MissingPrefix {
                target: self.target_index,
                got: self.known_prefix.len(),
            });
        }
        Ok(())
    }
}

/// Leakage predictions, stored trace-major: the `K` candidate values for one
/// trace are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisMatrix {
    candidates: Vec<i8>,
    trace_count: usize,
    values: Vec<f64>,
}

impl HypothesisMatrix {
    pub fn candidate_count(&self) -> usize {
        self.candidates.len()
    }

    pub fn trace_count(&self) -> usize {
        self.trace_count
    }

    pub fn candidates(&self) -> &[i8] {
        &self.candidates
    }

    /// Predictions of every candidate for trace `n`.
    pub fn for_trace(&self, n: usize) -> &[f64] {
        let k = self.candidates.len();
        &self.values[n * k..(n + 1) * k]
    }

    pub fn get(&self, candidate: usize, n: usize) -> f64 {
        self.values[n * self.candidates.len() + candidate]
    }

    /// Predictions of candidate `k` across traces.
    pub fn row(&self, k: usize) -> Vec<f64> {
        (0..self.trace_count).map(|n| self.get(k, n)).collect()
    }

    /// The same hypotheses restricted to the traces at `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.candidates.len());
        for &n in indices {
            values.extend_from_slice(self.for_trace(n));
        }
        Self {
            candidates: self.candidates.clone(),
            trace_count: indices.len(),
            values,
        }
    }
}

/// `L(a_{i-1} + w_k·x_i)` for every candidate and image. Skipped pixels are
/// expected to be zeroed already, so they drop out of the prefix sum.
pub fn hypotheses(images: &ImageSet, cfg: &AttackConfig) -> Result<HypothesisMatrix, AttackError> {
    hypotheses_split(images, images, cfg)
}

/// Like [`hypotheses`], but the prefix sum comes from `prefix_images` and the
/// target pixel from `target_images`.
pub fn hypotheses_split(
    prefix_images: &ImageSet,
    target_images: &ImageSet,
    cfg: &AttackConfig,
) -> Result<HypothesisMatrix, AttackError> {
    cfg.check(prefix_images.pixel_count())?;
    if target_images.len() != prefix_images.len() || target_images.pixel_count() != prefix_images.pixel_count() {
        return Err(AttackError::TraceCount {
            hyps: prefix_images.len(),
            traces: target_images.len(),
        });
    }
    let candidates = cfg.candidates.values().to_vec();
    let mut values = Vec::with_capacity(candidates.len() * prefix_images.len());
    for (prefix_img, target_img) in prefix_images.iter().zip(target_images.iter()) {
        hypothesis_row(prefix_img, target_img, cfg, &mut values);
    }
    Ok(HypothesisMatrix {
        candidates,
        trace_count: prefix_images.len(),
        values,
    })
}

/// Appends the predictions of every candidate for one image. Inputs are
/// assumed checked against `cfg` by the caller.
pub fn hypothesis_row(prefix_image: &[u8], target_image: &[u8], cfg: &AttackConfig, out: &mut Vec<f64>) {
    let i = cfg.target_index;
    let prefix = prefix_image[..i]
        .iter()
        .zip(&cfg.known_prefix)
        .fold(0i32, |acc, (&x, &w)| acc.wrapping_add(i32::from(x) * i32::from(w)));
    let x = i32::from(target_image[i]);
    out.extend(
        cfg.candidates
            .values()
            .iter()
            .map(|&w| cfg.leakage_model.predict(prefix.wrapping_add(i32::from(w) * x))),
    );
}

/// Single-pass sufficient statistics for Pearson correlation between `K`
/// hypotheses and `M` sample columns. Two accumulators over disjoint trace
/// batches merge into the accumulator of the union.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationAccumulator {
    candidates: usize,
    columns: usize,
    count: u64,
    sum_h: Vec<f64>,
    sum_hh: Vec<f64>,
    sum_x: Vec<f64>,
    sum_xx: Vec<f64>,
    sum_hx: Vec<f64>,
}

impl CorrelationAccumulator {
    pub fn new(candidates: usize, columns: usize) -> Self {
        Self {
            candidates,
            columns,
            count: 0,
            sum_h: vec![0.0; candidates],
            sum_hh: vec![0.0; candidates],
            sum_x: vec![0.0; columns],
            sum_xx: vec![0.0; columns],
            sum_hx: vec![0.0; candidates * columns],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds one trace: its hypotheses (length `K`) and window samples
    /// (length `M`).
    pub fn update(&mut self, hyps: &[f64], samples: &[f64]) {
        debug_assert_eq!(hyps.len(), self.candidates);
        debug_assert_eq!(samples.len(), self.columns);
        self.count += 1;
        for (j, &x) in samples.iter().enumerate() {
            self.sum_x[j] += x;
            self.sum_xx[j] += x * x;
        }
        for (k, &h) in hyps.iter().enumerate() {
            self.sum_h[k] += h;
            self.sum_hh[k] += h * h;
            let row = &mut self.sum_hx[k * self.columns..(k + 1) * self.columns];
            for (acc, &x) in row.iter_mut().zip(samples) {
                *acc += h * x;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), AttackError> {
        if self.candidates != other.candidates || self.columns != other.columns {
            return Err(AttackError::ShapeMismatch);
        }
        self.count += other.count;
        for (a, b) in [
            (&mut self.sum_h, &other.sum_h),
            (&mut self.sum_hh, &other.sum_hh),
            (&mut self.sum_x, &other.sum_x),
            (&mut self.sum_xx, &other.sum_xx),
            (&mut self.sum_hx, &other.sum_hx),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Correlation matrix. Constant hypotheses or columns give 0.
    pub fn scores(&self) -> Result<ScoreMatrix, AttackError> {
        if self.count < 2 {
            return Err(AttackError::TooFewTraces(self.count as usize));
        }
        let n = self.count as f64;
        let var_x: Vec<f64> = (0..self.columns)
            .map(|j| self.sum_xx[j] - self.sum_x[j] * self.sum_x[j] / n)
            .collect();
        let mut r = vec![0.0; self.candidates * self.columns];
        for k in 0..self.candidates {
            let var_h = self.sum_hh[k] - self.sum_h[k] * self.sum_h[k] / n;
            for j in 0..self.columns {
                let cov = self.sum_hx[k * self.columns + j] - self.sum_h[k] * self.sum_x[j] / n;
                let denom = (var_h * var_x[j]).sqrt();
                // Relative guard: variances that are rounding residue count as zero.
                let degenerate =
                    var_h <= 1e-12 * self.sum_hh[k].max(1.0) || var_x[j] <= 1e-12 * self.sum_xx[j].max(1.0);
                r[k * self.columns + j] = if degenerate || denom <= 0.0 {
                    0.0
                } else {
                    (cov / denom).clamp(-1.0, 1.0)
                };
            }
        }
        Ok(ScoreMatrix {
            candidates: self.candidates,
            columns: self.columns,
            r,
        })
    }
}

/// `K × M` Pearson coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    candidates: usize,
    columns: usize,
    r: Vec<f64>,
}

impl ScoreMatrix {
    pub fn candidate_count(&self) -> usize {
        self.candidates
    }

    pub fn column_count(&self) -> usize {
        self.columns
    }

    pub fn get(&self, k: usize, column: usize) -> f64 {
        self.r[k * self.columns + column]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.r[k * self.columns..(k + 1) * self.columns]
    }

    /// Max |r| over the window for candidate `k`.
    pub fn summary(&self, k: usize) -> f64 {
        self.row(k).iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn summaries(&self) -> Vec<f64> {
        (0..self.candidates).map(|k| self.summary(k)).collect()
    }
}

fn window_len(window: &[Range<usize>]) -> usize {
    window.iter().map(|r| r.len()).sum()
}

fn gather(row: &[f32], window: &[Range<usize>], out: &mut Vec<f64>) -> Result<(), AttackError> {
    out.clear();
    for r in window {
        let slice = row.get(r.clone()).ok_or(AttackError::WindowOutOfRange {
            start: r.start,
            end: r.end,
            len: row.len(),
        })?;
        out.extend(slice.iter().map(|&s| f64::from(s)));
    }
    Ok(())
}

/// Pearson correlation between every hypothesis and every window column.
pub fn correlate<'a, I>(hyps: &HypothesisMatrix, rows: I, window: &[Range<usize>]) -> Result<ScoreMatrix, AttackError>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut acc = accumulate(hyps, rows, window, 0..hyps.trace_count())?;
    if acc.count() as usize != hyps.trace_count() {
        return Err(AttackError::TraceCount {
            hyps: hyps.trace_count(),
            traces: acc.count() as usize,
        });
    }
    std::mem::replace(&mut acc, CorrelationAccumulator::new(0, 0)).scores()
}

/// Accumulates traces `range` of `rows` against the matching hypotheses.
pub fn accumulate<'a, I>(
    hyps: &HypothesisMatrix,
    rows: I,
    window: &[Range<usize>],
    range: Range<usize>,
) -> Result<CorrelationAccumulator, AttackError>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    if window_len(window) == 0 {
        return Err(AttackError::EmptyWindow);
    }
    let mut acc = CorrelationAccumulator::new(hyps.candidate_count(), window_len(window));
    let mut buf = Vec::with_capacity(window_len(window));
    for (n, row) in rows.into_iter().enumerate().skip(range.start).take(range.len()) {
        if n >= hyps.trace_count() {
            return Err(AttackError::TraceCount {
                hyps: hyps.trace_count(),
                traces: n + 1,
            });
        }
        gather(row, window, &mut buf)?;
        acc.update(hyps.for_trace(n), &buf);
    }
    Ok(acc)
}

/// Candidates ordered by descending summary score, ties by ascending value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub entries: Vec<(i8, f64)>,
}

impl Ranking {
    pub fn from_scores(candidates: &[i8], scores: &[f64]) -> Self {
        let mut entries: Vec<(i8, f64)> = candidates.iter().copied().zip(scores.iter().copied()).collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self { entries }
    }

    pub fn best(&self) -> Option<i8> {
        self.entries.first().map(|e| e.0)
    }

    /// 1-based position of `weight` in the deterministic order.
    pub fn rank_of(&self, weight: i8) -> Result<usize, AttackError> {
        self.entries
            .iter()
            .position(|e| e.0 == weight)
            .map(|p| p + 1)
            .ok_or(AttackError::TrueWeightAbsent(weight))
    }

    /// Tie-aware rank: the mean position of all candidates sharing
    /// `weight`'s score. Used for guessing entropy so that a window with no
    /// information (every score equal) ranks the true value in the middle
    /// instead of wherever the value order puts it.
    pub fn mid_rank_of(&self, weight: i8) -> Result<f64, AttackError> {
        let score = self
            .entries
            .iter()
            .find(|e| e.0 == weight)
            .ok_or(AttackError::TrueWeightAbsent(weight))?
            .1;
        let better = self.entries.iter().filter(|e| e.1 > score).count();
        let tied = self.entries.iter().filter(|e| e.1 == score).count();
        Ok(better as f64 + (tied as f64 + 1.0) / 2.0)
    }
}

/// Full recovery of one weight from a set of rows.
pub fn recover_weight<'a, I>(rows: I, images: &ImageSet, cfg: &AttackConfig) -> Result<Ranking, AttackError>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let hyps = hypotheses(images, cfg)?;
    let scores = correlate(&hyps, rows, &cfg.window)?;
    Ok(Ranking::from_scores(hyps.candidates(), &scores.summaries()))
}

/// Tie-aware rank of `true_weight` after the first `t` traces, for every `t`
/// in `schedule` (strictly increasing, each at most the trace count).
pub fn rank_trajectory<'a, I>(
    hyps: &HypothesisMatrix,
    rows: I,
    window: &[Range<usize>],
    schedule: &[usize],
    true_weight: i8,
) -> Result<Vec<f64>, AttackError>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    check_schedule(schedule)?;
    if window_len(window) == 0 {
        return Err(AttackError::EmptyWindow);
    }
    let mut acc = CorrelationAccumulator::new(hyps.candidate_count(), window_len(window));
    let mut buf = Vec::new();
    let mut ranks = Vec::with_capacity(schedule.len());
    let mut next = schedule.iter().peekable();
    for (n, row) in rows.into_iter().enumerate() {
        let Some(&&target) = next.peek() else { break };
        if n >= hyps.trace_count() {
            break;
        }
        gather(row, window, &mut buf)?;
        acc.update(hyps.for_trace(n), &buf);
        if n + 1 == target {
            let scores = acc.scores()?;
            ranks.push(Ranking::from_scores(hyps.candidates(), &scores.summaries()).mid_rank_of(true_weight)?);
            next.next();
        }
    }
    if ranks.len() != schedule.len() {
        return Err(AttackError::TraceCount {
            hyps: hyps.trace_count(),
            traces: schedule.last().copied().unwrap_or(0),
        });
    }
    Ok(ranks)
}

/// Streaming attack on one weight: feed traces one at a time and collect the
/// tie-aware rank of the true weight at each scheduled trace count.
#[derive(Debug, Clone)]
pub struct RankTracker {
    cfg: AttackConfig,
    true_weight: i8,
    schedule: Vec<usize>,
    acc: CorrelationAccumulator,
    ranks: Vec<f64>,
    hyp_buf: Vec<f64>,
    sample_buf: Vec<f64>,
}

impl RankTracker {
    pub fn new(
        cfg: AttackConfig,
        pixel_count: usize,
        true_weight: i8,
        schedule: Vec<usize>,
    ) -> Result<Self, AttackError> {
        cfg.check(pixel_count)?;
        check_schedule(&schedule)?;
        if !cfg.candidates.values().contains(&true_weight) {
            return Err(AttackError::TrueWeightAbsent(true_weight));
        }
        let columns = window_len(&cfg.window);
        if columns == 0 {
            return Err(AttackError::EmptyWindow);
        }
        Ok(Self {
            acc: CorrelationAccumulator::new(cfg.candidates.len(), columns),
            ranks: Vec::with_capacity(schedule.len()),
            hyp_buf: Vec::with_capacity(cfg.candidates.len()),
            sample_buf: Vec::with_capacity(columns),
            cfg,
            true_weight,
            schedule,
        })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }

    pub fn count(&self) -> usize {
        self.acc.count() as usize
    }

    /// True once every scheduled trace count has been reached.
    pub fn is_done(&self) -> bool {
        self.ranks.len() == self.schedule.len()
    }

    /// Adds one trace. Traces beyond the last scheduled count are ignored.
    pub fn push(&mut self, prefix_image: &[u8], target_image: &[u8], row: &[f32]) -> Result<(), AttackError> {
        if self.is_done() {
            return Ok(());
        }
        let pixels = self.cfg.known_prefix.len().max(self.cfg.target_index + 1);
        if prefix_image.len() < pixels || target_image.len() <= self.cfg.target_index {
            return Err(AttackError::TargetOutOfRange {
                index: self.cfg.target_index,
                pixel_count: prefix_image.len().min(target_image.len()),
            });
        }
        gather(row, &self.cfg.window, &mut self.sample_buf)?;
        self.hyp_buf.clear();
        hypothesis_row(prefix_image, target_image, &self.cfg, &mut self.hyp_buf);
        self.acc.update(&self.hyp_buf, &self.sample_buf);
        if self.count() == self.schedule[self.ranks.len()] {
            let rank = self.ranking()?.mid_rank_of(self.true_weight)?;
            self.ranks.push(rank);
        }
        Ok(())
    }

    /// Ranking over the traces seen so far.
    pub fn ranking(&self) -> Result<Ranking, AttackError> {
        let scores = self.acc.scores()?;
        Ok(Ranking::from_scores(self.cfg.candidates.values(), &scores.summaries()))
    }

    /// Ranks at every scheduled count; fails if the stream ended early.
    pub fn finish(self) -> Result<Vec<f64>, AttackError> {
        if !self.is_done() {
            return Err(AttackError::TraceCount {
                hyps: self.schedule.last().copied().unwrap_or(0),
                traces: self.count(),
            });
        }
        Ok(self.ranks)
    }
}

fn check_schedule(schedule: &[usize]) -> Result<(), AttackError> {
    if schedule.is_empty() || schedule[0] < 2 || schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AttackError::Schedule);
    }
    Ok(())
}

/// Geometric trace-count grid from `start` to `end` (both included) with
/// `per_decade` points per factor of ten, rounded and de-duplicated.
pub fn trace_schedule(start: usize, end: usize, per_decade: usize) -> Vec<usize> {
    let start = start.max(2);
    if end <= start {
        return vec![end.max(2)];
    }
    let steps = ((end as f64 / start as f64).log10() * per_decade.max(1) as f64).ceil() as usize;
    let mut out: Vec<usize> = (0..=steps)
        .map(|s| {
            let v = start as f64 * 10f64.powf(s as f64 / per_decade.max(1) as f64);
            (v.round() as usize).min(end)
        })
        .collect();
    out.push(end);
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GePoint {
    pub trace_count: usize,
    pub ge_bits: f64,
}

/// Guessing entropy of one weight against the number of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeCurve {
    pub weight_index: usize,
    pub experiment_count: usize,
    pub points: Vec<GePoint>,
}

impl GeCurve {
    pub fn final_ge(&self) -> Option<f64> {
        self.points.last().map(|p| p.ge_bits)
    }

    pub fn at(&self, trace_count: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.trace_count == trace_count)
            .map(|p| p.ge_bits)
    }

    /// Smallest trace count from which GE stays at 0 for the rest of the curve.
    pub fn convergence_point(&self) -> Option<usize> {
        let mut out = None;
        for p in self.points.iter().rev() {
            if p.ge_bits == 0.0 {
                out = Some(p.trace_count);
            } else {
                break;
            }
        }
        out
    }
}

/// `GE(t) = log2(mean rank)` over experiments, where `ranks[e][s]` is the
/// 1-based rank of the true weight in experiment `e` after `schedule[s]`
/// traces.
pub fn guessing_entropy(weight_index: usize, schedule: &[usize], ranks: &[Vec<f64>]) -> Result<GeCurve, AttackError> {
    if ranks.is_empty() {
        return Err(AttackError::NoExperiments);
    }
    check_schedule(schedule)?;
    let mut points = Vec::with_capacity(schedule.len());
    for (s, &trace_count) in schedule.iter().enumerate() {
        let mut sum = 0.0;
        for exp in ranks {
            if exp.len() != schedule.len() {
                return Err(AttackError::RankCount {
                    expected: schedule.len(),
                    got: exp.len(),
                });
            }
            if exp[s] < 1.0 {
                return Err(AttackError::InvalidRank(exp[s] as usize));
            }
            sum += exp[s];
        }
        let ge_bits = (sum / ranks.len() as f64).log2().max(0.0);
        points.push(GePoint { trace_count, ge_bits });
    }
    Ok(GeCurve {
        weight_index,
        experiment_count: ranks.len(),
        points,
    })
}

/// Fraction of sequences in which every MAC strictly between `target` and
/// `next_important` was skipped (1 when they are adjacent).
pub fn all_gap_skipped_rate(
    seqs: &[ClassifiedSequence],
    target: usize,
    next_important: usize,
) -> Result<f64, AttackError> {
    if seqs.is_empty() {
        return Err(AttackError::Adjacency("no sequences".into()));
    }
    if next_important <= target {
        return Err(AttackError::Adjacency(format!(
            "next important MAC {next_important} does not follow target {target}"
        )));
    }
    let mut hits = 0usize;
    for seq in seqs {
        let gap = seq
            .entries
            .get(target + 1..next_important)
            .ok_or_else(|| AttackError::Adjacency("sequence shorter than the studied span".into()))?;
        if gap.iter().all(|e| e.label == ImportanceLabel::Skipped) {
            hits += 1;
        }
    }
    Ok(hits as f64 / seqs.len() as f64)
}

/// One experiment's preprocessed data for [`adjacency_study`]. Row `n` of
/// `aligned`, `seqs[n]`, `filtered` image `n` and `raw` image `n` describe the
/// same retained trace.
#[derive(Debug, Clone, Copy)]
pub struct AdjacencyInput<'a> {
    pub aligned: &'a AlignedTraceSet,
    pub seqs: &'a [ClassifiedSequence],
    pub filtered: &'a ImageSet,
    pub raw: &'a ImageSet,
    pub weights: &'a [i8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyReport {
    pub target: usize,
    pub next_important: usize,
    /// Number of non-important MACs between the two.
    pub gap: usize,
    pub processed: GeCurve,
    pub skipped: GeCurve,
    /// Fraction of traces where every gap MAC was skipped.
    pub adjacency_rate: f64,
    /// Fraction of traces where the target MAC itself ran.
    pub processed_fraction: f64,
    pub trace_count: usize,
}

/// Splits each experiment's traces by whether non-important MAC `target` ran
/// and attacks `w_target` in both halves through the aligned block of
/// `next_important`. Hypotheses take the prefix from the filtered images and
/// the target pixel from the raw image, so both halves are attacked with the
/// same predictions. Both halves are cut to the same length before the
/// schedule is applied.
pub fn adjacency_study(
    inputs: &[AdjacencyInput<'_>],
    target: usize,
    next_important: usize,
    schedule: &[usize],
) -> Result<AdjacencyReport, AttackError> {
    if inputs.is_empty() {
        return Err(AttackError::NoExperiments);
    }
    if target == 0 || next_important <= target {
        return Err(AttackError::Adjacency(format!(
            "need 1 <= target < next important, got {target} and {next_important}"
        )));
    }

    let mut splits = Vec::with_capacity(inputs.len());
    let mut gap_hits = 0.0;
    let mut processed_total = 0usize;
    let mut total = 0usize;
    for input in inputs {
        let block = input
            .aligned
            .block_of_pixel(next_important)
            .ok_or_else(|| AttackError::Adjacency(format!("MAC {next_important} is not an aligned important MAC")))?;
        if input.seqs.len() != input.aligned.len() {
            return Err(AttackError::Adjacency("sequence and row counts differ".into()));
        }
        let mut processed = Vec::new();
        let mut skipped = Vec::new();
        for (n, seq) in input.seqs.iter().enumerate() {
            let label = seq
                .entries
                .get(target)
                .ok_or_else(|| AttackError::Adjacency("sequence shorter than target".into()))?
                .label;
            match label {
                ImportanceLabel::Executed => processed.push(n),
                ImportanceLabel::Skipped => skipped.push(n),
                ImportanceLabel::Important => {
                    return Err(AttackError::Adjacency(format!("MAC {target} is important")));
                }
            }
        }
        gap_hits += all_gap_skipped_rate(input.seqs, target, next_important)? * input.seqs.len() as f64;
        processed_total += processed.len();
        total += input.seqs.len();
        splits.push((input, block, processed, skipped));
    }

    let usable = splits
        .iter()
        .map(|(_, _, p, s)| p.len().min(s.len()))
        .min()
        .unwrap_or(0);
    if usable < 2 {
        return Err(AttackError::Adjacency(
            "degenerate split: one set is (nearly) empty".into(),
        ));
    }
    let schedule: Vec<usize> = schedule.iter().copied().filter(|&t| t <= usable).collect();
    check_schedule(&schedule)?;

    let mut processed_ranks = Vec::new();
    let mut skipped_ranks = Vec::new();
    for (input, block, processed, skipped) in &splits {
        let cfg = AttackConfig::for_weight(input.weights, target, vec![input.aligned.block(*block)]);
        let hyps = hypotheses_split(input.filtered, input.raw, &cfg)?;
        let truth = input.weights[target];
        for (set, out) in [(processed, &mut processed_ranks), (skipped, &mut skipped_ranks)] {
            let idx = &set[..usable];
            let sub = hyps.select(idx);
            let rows = idx.iter().map(|&n| input.aligned.rows[n].as_slice());
            out.push(rank_trajectory(&sub, rows, &cfg.window, &schedule, truth)?);
        }
    }

    Ok(AdjacencyReport {
        target,
        next_important,
        gap: next_important - target - 1,
        processed: guessing_entropy(target, &schedule, &processed_ranks)?,
        skipped: guessing_entropy(target, &schedule, &skipped_ranks)?,
        adjacency_rate: gap_hits / total as f64,
        processed_fraction: processed_total as f64 / total as f64,
        trace_count: usable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(rows: &[&[u8]]) -> ImageSet {
        ImageSet::from_rows(rows[0].len(), &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn candidate_set_validation() {
        assert_eq!(CandidateSet::all().len(), 256);
        assert!(CandidateSet::new(vec![]).is_err());
        assert!(matches!(
            CandidateSet::new(vec![1, 2, 1]),
            Err(AttackError::DuplicateCandidate(1))
        ));
    }

    #[test]
    fn single_pixel_hypotheses_are_candidate_weights() {
        // x = [1, 0, ...] with w_0 excluded: a_0 = w_0·x_0 enters the prefix.
        let imgs = images(&[&[1, 1, 0, 0]]);
        let cfg = AttackConfig::for_weight(&[0, 5, 0, 0], 1, vec![0..1]);
        let h = hypotheses(&imgs, &cfg).unwrap();
        assert_eq!(h.candidate_count(), 256);
        for (k, &w) in cfg.candidates.values().iter().enumerate() {
            assert_eq!(h.get(k, 0), f64::from((w as i32 as u32).count_ones()));
        }
    }

    #[test]
    fn zero_pixel_makes_rows_identical() {
        let imgs = images(&[&[3, 0, 1], &[200, 0, 9], &[17, 0, 4]]);
        let cfg = AttackConfig::for_weight(&[-7, 0, 0], 1, vec![0..1]);
        let h = hypotheses(&imgs, &cfg).unwrap();
        for n in 0..3 {
            let first = h.get(0, n);
            assert!(h.for_trace(n).iter().all(|&v| v == first));
        }
        let rows: Vec<Vec<f32>> = vec![vec![1.0], vec![5.0], vec![2.0]];
        let scores = correlate(&h, rows.iter().map(|r| r.as_slice()), &[0..1]).unwrap();
        let first = scores.summary(0);
        assert!(first > 0.0);
        assert!(scores.summaries().iter().all(|&s| s == first));
    }

    #[test]
    fn prefix_and_range_checks() {
        let imgs = images(&[&[1, 2, 3]]);
        let mut cfg = AttackConfig::for_weight(&[1, 2, 3], 2, vec![0..1]);
        cfg.known_prefix.truncate(1);
        assert!(matches!(
            hypotheses(&imgs, &cfg),
            Err(AttackError::MissingPrefix { .. })
        ));
        let cfg = AttackConfig::for_weight(&[1, 2, 3], 3, vec![0..1]);
        assert!(matches!(
            hypotheses(&imgs, &cfg),
            Err(AttackError::TargetOutOfRange { .. })
        ));
        let cfg = AttackConfig::for_weight(&[1, 2, 3], 0, vec![0..1]);
        assert!(hypotheses(&imgs, &cfg).is_err());
    }

    #[test]
    fn perfect_column_correlates_to_one() {
        let imgs = images(&[&[0, 3], &[0, 7], &[0, 100], &[0, 255], &[0, 19]]);
        let cfg = AttackConfig::for_weight(&[0, 0], 1, vec![1..2]);
        let h = hypotheses(&imgs, &cfg).unwrap();
        let k = cfg.candidates.values().iter().position(|&w| w == 37).unwrap();
        let rows: Vec<Vec<f32>> = (0..5).map(|n| vec![-3.0, h.get(k, n) as f32]).collect();
        let scores = correlate(&h, rows.iter().map(|r| r.as_slice()), &cfg.window).unwrap();
        assert!((scores.get(k, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_traces() {
        let imgs = images(&[&[0, 3]]);
        let cfg = AttackConfig::for_weight(&[0, 0], 1, vec![0..1]);
        let h = hypotheses(&imgs, &cfg).unwrap();
        let rows = [vec![1.0f32, 2.0]];
        assert!(matches!(
            correlate(&h, rows.iter().map(|r| r.as_slice()), &[0..1]),
            Err(AttackError::TooFewTraces(1))
        ));
        let rows = [vec![1.0f32]];
        assert!(matches!(
            correlate(&h, rows.iter().map(|r| r.as_slice()), &[0..2]),
            Err(AttackError::WindowOutOfRange { .. })
        ));
    }

    #[test]
    fn ranking_breaks_ties_by_value() {
        let r = Ranking::from_scores(&[5, -3, 9, 0], &[0.2, 0.9, 0.2, 0.2]);
        assert_eq!(r.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![-3, 0, 5, 9]);
        assert_eq!(r.rank_of(5).unwrap(), 3);
        assert_eq!(r.mid_rank_of(5).unwrap(), 3.0);
        assert_eq!(r.mid_rank_of(-3).unwrap(), 1.0);
        assert!(matches!(r.rank_of(7), Err(AttackError::TrueWeightAbsent(7))));
    }

    #[test]
    fn ge_arithmetic() {
        let schedule = [10, 20];
        let ones = vec![vec![1.0, 1.0]; 5];
        let curve = guessing_entropy(3, &schedule, &ones).unwrap();
        assert!(curve.points.iter().all(|p| p.ge_bits == 0.0));
        assert_eq!(curve.convergence_point(), Some(10));

        let mixed: Vec<Vec<f64>> = [1.0, 1.0, 2.0, 2.0, 2.0].iter().map(|&r| vec![r, 1.0]).collect();
        let curve = guessing_entropy(3, &schedule, &mixed).unwrap();
        assert!((curve.points[0].ge_bits - 1.6f64.log2()).abs() < 1e-12);
        assert!((curve.points[0].ge_bits - 0.678).abs() < 1e-3);
        assert_eq!(curve.convergence_point(), Some(20));

        assert!(guessing_entropy(3, &schedule, &[]).is_err());
        assert!(guessing_entropy(3, &[20, 10], &ones).is_err());
        assert!(guessing_entropy(3, &schedule, &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn schedule_is_geometric_and_increasing() {
        let s = trace_schedule(10, 10_000, 10);
        assert_eq!(s.first(), Some(&10));
        assert_eq!(s.last(), Some(&10_000));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.len(), 31);
        assert_eq!(trace_schedule(100, 50, 10), vec![50]);
    }

    #[test]
    fn gap_rate_counts_fully_skipped_spans() {
        use crate::patterns::Entry;
        let seq = |labels: &str| ClassifiedSequence {
            entries: crate::label::parse_labels(labels)
                .unwrap()
                .into_iter()
                .map(|label| Entry {
                    start: 0,
                    label,
                    length: 1,
                })
                .collect(),
            unmatched_samples: 0,
        };
        let seqs = vec![seq("IESSI"), seq("IEESI"), seq("ISSSI"), seq("IESSI")];
        assert_eq!(all_gap_skipped_rate(&seqs, 1, 4).unwrap(), 0.75);
        assert_eq!(all_gap_skipped_rate(&seqs, 3, 4).unwrap(), 1.0);
        assert!(all_gap_skipped_rate(&seqs, 4, 2).is_err());
    }
}
