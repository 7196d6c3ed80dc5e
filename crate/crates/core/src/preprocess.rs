// SPDX-License-Identifier: Apache-2.0

//! Turns classified traces into attack-ready data: keep the consistent
//! classifications, zero the pixels that were never processed, and stitch the
//! important-MAC segments into vertically aligned rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::PreprocessError;
use crate::label::ImportanceLabel;
use crate::leakage::{Iapam, ImageSet, TraceSet};
use crate::patterns::ClassifiedSequence;

/// Result of grouping classified sequences by where their important MACs are.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionOutcome {
    /// Trace indices in the largest group, ascending.
    pub retained: Vec<usize>,
    /// Ordinal positions of important entries shared by the retained group.
    pub key: Vec<usize>,
    /// Everything else, ascending.
    pub discarded: Vec<usize>,
    pub partition_count: usize,
}

impl PartitionOutcome {
    pub fn retained_fraction(&self) -> f64 {
        let total = self.retained.len() + self.discarded.len();
        if total == 0 {
            0.0
        } else {
            self.retained.len() as f64 / total as f64
        }
    }
}

/// Important-entry positions and entry count.
type PartitionKey = (Vec<usize>, usize);

/// Groups sequences by (important-entry positions, entry count) and keeps the
/// largest group. Equal-sized groups resolve to the lexicographically smallest
/// key. Grouping is a pure reduction, so input order beyond the indices it
/// reports does not matter.
pub fn partition_and_retain(seqs: &[ClassifiedSequence]) -> Result<PartitionOutcome, PreprocessError> {
    if seqs.is_empty() {
        return Err(PreprocessError::Empty);
    }
    let mut groups: BTreeMap<PartitionKey, Vec<usize>> = BTreeMap::new();
    for (n, seq) in seqs.iter().enumerate() {
        groups
            .entry((seq.important_positions(), seq.len()))
            .or_default()
            .push(n);
    }
    let partition_count = groups.len();
    let mut best: Option<(&PartitionKey, &Vec<usize>)> = None;
    for (key, members) in &groups {
        if best.map_or(true, |(_, m)| members.len() > m.len()) {
            best = Some((key, members));
        }
    }
    let ((key, _), retained) = best.expect("at least one group");
    let retained = retained.clone();
    let mut keep = vec![false; seqs.len()];
    for &n in &retained {
        keep[n] = true;
    }
    Ok(PartitionOutcome {
        discarded: (0..seqs.len()).filter(|&n| !keep[n]).collect(),
        retained,
        key: key.clone(),
        partition_count,
    })
}

/// Processed-pixel mask: set where the MAC ran (I or E), clear where skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub bits: Vec<bool>,
}

impl PixelMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl std::fmt::Display for PixelMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// One mask per sequence, in raster order. Each sequence must hold exactly
/// `pixel_count` entries and at least one processed MAC.
pub fn build_pixel_masks(seqs: &[ClassifiedSequence], pixel_count: usize) -> Result<Vec<PixelMask>, PreprocessError> {
    seqs.iter()
        .enumerate()
        .map(|(index, seq)| {
            if seq.len() != pixel_count {
                return Err(PreprocessError::MalformedClassification {
                    index,
                    expected: pixel_count,
                    got: seq.len(),
                });
            }
            let bits: Vec<bool> = seq.entries.iter().map(|e| e.label.is_processed()).collect();
            if !bits.iter().any(|&b| b) {
                return Err(PreprocessError::NothingProcessed(index));
            }
            Ok(PixelMask { bits })
        })
        .collect()
}

/// Zeroes every pixel whose mask bit is clear. Mask `n` applies to image `n`.
pub fn apply_masks(images: &ImageSet, masks: &[PixelMask]) -> Result<ImageSet, PreprocessError> {
    if masks.len() != images.len() {
        return Err(PreprocessError::MaskCount {
            masks: masks.len(),
            images: images.len(),
        });
    }
    let mut out = images.clone();
    for (n, mask) in masks.iter().enumerate() {
        if mask.len() != images.pixel_count() {
            return Err(PreprocessError::MaskLength {
                index: n,
                expected: images.pixel_count(),
                got: mask.len(),
            });
        }
        for (px, &keep) in out.image_mut(n).iter_mut().zip(&mask.bits) {
            if !keep {
                *px = 0;
            }
        }
    }
    Ok(out)
}

/// Important-MAC segments of every trace, concatenated in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignedTraceSet {
    /// Samples per important MAC.
    pub block_len: usize,
    /// Pixel position (within the neuron) of each block, in order.
    pub block_pixels: Vec<usize>,
    pub rows: Vec<Vec<f32>>,
}

impl AlignedTraceSet {
    pub fn row_len(&self) -> usize {
        self.block_len * self.block_pixels.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sample range of block `k`.
    pub fn block(&self, k: usize) -> std::ops::Range<usize> {
        k * self.block_len..(k + 1) * self.block_len
    }

    /// Block index of the important MAC at `pixel`, if any.
    pub fn block_of_pixel(&self, pixel: usize) -> Option<usize> {
        self.block_pixels.iter().position(|&p| p == pixel)
    }

    /// True when the rows carry no samples; such a set cannot be attacked.
    pub fn is_attack_infeasible(&self) -> bool {
        self.block_pixels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            block_len: self.block_len,
            block_pixels: self.block_pixels.clone(),
            rows: indices.iter().map(|&n| self.rows[n].clone()).collect(),
        }
    }
}

/// Concatenates the sample ranges of important entries, trace by trace.
/// `seqs[n]` classifies `traces[n]`; entry offsets are absolute sample indices
/// so a per-neuron view of a layer classification works unchanged. Every
/// sequence must carry the same important positions; mismatches are rejected
/// rather than padded.
pub fn concatenate_important(
    traces: &TraceSet,
    seqs: &[ClassifiedSequence],
) -> Result<AlignedTraceSet, PreprocessError> {
    if seqs.len() != traces.len() {
        return Err(PreprocessError::TraceCount {
            sequences: seqs.len(),
            traces: traces.len(),
        });
    }
    let Some(first) = seqs.first() else {
        return Ok(AlignedTraceSet::default());
    };
    let block_pixels = first.important_positions();
    let block_len = block_pixels.first().map_or(0, |&i| first.entries[i].length);

    let mut rows = Vec::with_capacity(seqs.len());
    for (index, (trace, seq)) in traces.iter().zip(seqs).enumerate() {
        let mut row = Vec::with_capacity(block_len * block_pixels.len());
        let mut count = 0;
        for entry in seq.entries.iter().filter(|e| e.label == ImportanceLabel::Important) {
            if entry.length != block_len {
                return Err(PreprocessError::BlockLength {
                    first: block_len,
                    other: entry.length,
                });
            }
            let segment = trace
                .samples
                .get(entry.start..entry.end())
                .ok_or(PreprocessError::EntryOutOfRange {
                    start: entry.start,
                    len: entry.length,
                    trace_len: trace.samples.len(),
                })?;
            row.extend_from_slice(segment);
            count += 1;
        }
        if count != block_pixels.len() || seq.important_positions() != block_pixels {
            return Err(PreprocessError::Alignment {
                index,
                expected: block_pixels.len(),
                got: count,
            });
        }
        rows.push(row);
    }
    Ok(AlignedTraceSet {
        block_len,
        block_pixels,
        rows,
    })
}

/// IaPAM recovery for the control-flow-free variant: a position is marked
/// important iff every sequence reports it executed.
pub fn derive_iapam(seqs: &[ClassifiedSequence]) -> Result<Iapam, PreprocessError> {
    let first = seqs.first().ok_or(PreprocessError::Empty)?;
    let len = first.len();
    let mut bits = vec![true; len];
    for (index, seq) in seqs.iter().enumerate() {
        if seq.len() != len {
            return Err(PreprocessError::MalformedClassification {
                index,
                expected: len,
                got: seq.len(),
            });
        }
        for (bit, entry) in bits.iter_mut().zip(&seq.entries) {
            match entry.label {
                ImportanceLabel::Important => return Err(PreprocessError::UnexpectedImportant),
                ImportanceLabel::Skipped => *bit = false,
                ImportanceLabel::Executed => {}
            }
        }
    }
    Ok(Iapam::new(bits))
}

/// Relabels control-flow-free classifications with a derived IaPAM so they
/// can go through [`concatenate_important`]: executed entries at important
/// positions become I.
pub fn relabel_with_iapam(seq: &ClassifiedSequence, iapam: &Iapam) -> ClassifiedSequence {
    let mut out = seq.clone();
    for (i, e) in out.entries.iter_mut().enumerate() {
        if e.label == ImportanceLabel::Executed && i < iapam.len() && iapam.is_important(i) {
            e.label = ImportanceLabel::Important;
        }
    }
    out
}
