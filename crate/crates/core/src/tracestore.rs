// SPDX-License-Identifier: Apache-2.0

//! Little-endian binary containers for traces, images and skip tables, plus
//! CSV export of attack results.
//!
//! Trace container (`MPBTRC01`), all integers little-endian:
//!
//! ```text
//! magic          8 bytes  "MPBTRC01"
//! version        u16      1
//! flags          u16      bit 0: ragged, bit 1: ground truth present
//! trace_count    u32
//! metadata_len   u32
//! metadata       metadata_len bytes, UTF-8 "key=value\n" lines, keys sorted
//! sample counts  u32 per trace if ragged, else a single u32
//! image indices  u32 per trace
//! samples        f32 per sample, trace after trace
//! ground truth   (flag bit 1 only) per trace: u32 label count, then one
//!                byte per label (0 = I, 1 = E, 2 = S)
//! ```
//!
//! Image container (`MPBIMG01`): magic, image_count u32, pixel_count u32,
//! then image_count × pixel_count bytes.
//!
//! Skip-table container (`MPBSKP01`): magic, trace_count u32, width u32, then
//! one byte per decision (1 = executed, 0 = skipped).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::cpa::GeCurve;
use crate::error::StoreError;
use crate::label::ImportanceLabel;
use crate::leakage::{ImageSet, SkipTable, Trace, TraceSet};
use crate::patterns::{PatternLibrary, PatternTemplate};
use crate::preprocess::AlignedTraceSet;

pub const TRACE_MAGIC: &[u8; 8] = b"MPBTRC01";
pub const IMAGE_MAGIC: &[u8; 8] = b"MPBIMG01";
pub const SKIP_MAGIC: &[u8; 8] = b"MPBSKP01";
pub const TRACE_VERSION: u16 = 1;

const FLAG_RAGGED: u16 = 1;
const FLAG_GROUND_TRUTH: u16 = 2;

/// Metadata key written by every trace container.
pub const KEY_GROUND_TRUTH: &str = "ground_truth";
pub const KEY_CONFIG_HASH: &str = "config_hash";
pub const KEY_KIND: &str = "kind";

/// Sorted key/value metadata. Keys may not contain `=` or newlines; values
/// may not contain newlines.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Metadata(BTreeMap<String, String>);

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) -> Result<(), StoreError> {
        let key = key.into();
        let value = value.to_string();
        if key.is_empty() || key.contains(['=', '\n']) || value.contains('\n') {
            return Err(StoreError::Metadata(format!("unencodable entry {key:?}")));
        }
        self.0.insert(key, value);
        Ok(())
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Result<Self, StoreError> {
        self.insert(key, value)?;
        Ok(self)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, StoreError> {
        self.get(key)
            .ok_or_else(|| StoreError::Metadata(format!("missing key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, StoreError> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| StoreError::Metadata(format!("bad value {raw:?} for {key:?}")))
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Hard error unless both sides carry the same config hash.
    pub fn check_config_hash(&self, expected: &str) -> Result<(), StoreError> {
        let found = self.require(KEY_CONFIG_HASH)?;
        if found != expected {
            return Err(StoreError::ConfigMismatch {
                left: found.to_owned(),
                right: expected.to_owned(),
            });
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in &self.0 {
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        let text = std::str::from_utf8(bytes).map_err(|e| StoreError::Metadata(e.to_string()))?;
        let mut map = BTreeMap::new();
        let mut last: Option<&str> = None;
        for line in text.split_terminator('\n') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| StoreError::Metadata(format!("line without '=': {line:?}")))?;
            if last.is_some_and(|prev| prev >= k) {
                return Err(StoreError::Metadata(format!("keys not strictly sorted at {k:?}")));
            }
            last = Some(k);
            map.insert(k.to_owned(), v.to_owned());
        }
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(StoreError::Metadata("last line is not newline-terminated".into()));
        }
        Ok(Self(map))
    }
}

fn to_u32(n: usize, what: &'static str) -> Result<u32, StoreError> {
    u32::try_from(n).map_err(|_| StoreError::TooLarge(what))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::Truncated(what),
        _ => StoreError::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R, what: &'static str) -> Result<u16, StoreError> {
    let mut b = [0u8; 2];
    read_exact_or(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_magic<R: Read>(r: &mut R, expected: &[u8; 8]) -> Result<(), StoreError> {
    let mut found = [0u8; 8];
    read_exact_or(r, &mut found, "magic")?;
    if &found != expected {
        return Err(StoreError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<(), StoreError> {
    let extra = io::copy(r, &mut io::sink())?;
    if extra != 0 {
        return Err(StoreError::TrailingBytes(extra));
    }
    Ok(())
}

fn read_u32_vec<R: Read>(r: &mut R, count: usize, what: &'static str) -> Result<Vec<u32>, StoreError> {
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        out.push(read_u32(r, what)?);
    }
    Ok(out)
}

/// Serializes `set` with `metadata`. The `ground_truth` key is set from the
/// data; ragged mode is chosen iff sample counts differ.
pub fn encode_traces<W: Write>(w: &mut W, set: &TraceSet, metadata: &Metadata) -> Result<(), StoreError> {
    let with_gt = set.has_ground_truth();
    if !with_gt && set.iter().any(|t| t.ground_truth.is_some()) {
        return Err(StoreError::Metadata("ground truth present on only some traces".into()));
    }
    let mut metadata = metadata.clone();
    metadata.insert(KEY_GROUND_TRUTH, with_gt)?;
    let meta = metadata.encode();

    let fixed = if set.is_empty() { Some(0) } else { set.fixed_length() };
    let mut flags = 0;
    if fixed.is_none() {
        flags |= FLAG_RAGGED;
    }
    if with_gt {
        flags |= FLAG_GROUND_TRUTH;
    }

    w.write_all(TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&to_u32(set.len(), "trace count")?.to_le_bytes())?;
    w.write_all(&to_u32(meta.len(), "metadata length")?.to_le_bytes())?;
    w.write_all(&meta)?;
    match fixed {
        Some(len) => w.write_all(&to_u32(len, "sample count")?.to_le_bytes())?,
        None => {
            for t in set.iter() {
                w.write_all(&to_u32(t.samples.len(), "sample count")?.to_le_bytes())?;
            }
        }
    }
    for t in set.iter() {
        w.write_all(&t.image_index.to_le_bytes())?;
    }
    for t in set.iter() {
        for s in &t.samples {
            w.write_all(&s.to_le_bytes())?;
        }
    }
    if with_gt {
        for t in set.iter() {
            let gt = t.ground_truth.as_deref().unwrap_or_default();
            w.write_all(&to_u32(gt.len(), "label count")?.to_le_bytes())?;
            w.write_all(&gt.iter().map(|l| l.code()).collect::<Vec<_>>())?;
        }
    }
    Ok(())
}

pub fn write_traces(path: impl AsRef<Path>, set: &TraceSet, metadata: &Metadata) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_traces(&mut w, set, metadata)?;
    w.flush()?;
    Ok(())
}

/// Incremental reader: holds the header, per-trace counts and image indices
/// in memory and yields one trace at a time (without ground truth). Memory
/// is `O(trace_count)` words plus one trace.
pub struct TraceReader<R: Read> {
    inner: R,
    metadata: Metadata,
    has_ground_truth: bool,
    lengths: Vec<u32>,
    image_indices: Vec<u32>,
    next: usize,
}

impl TraceReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut inner: R) -> Result<Self, StoreError> {
        read_magic(&mut inner, TRACE_MAGIC)?;
        let version = read_u16(&mut inner, "version")?;
        if version != TRACE_VERSION {
            return Err(StoreError::Version(version));
        }
        let flags = read_u16(&mut inner, "flags")?;
        if flags & !(FLAG_RAGGED | FLAG_GROUND_TRUTH) != 0 {
            return Err(StoreError::Flags(flags));
        }
        let count = read_u32(&mut inner, "trace count")? as usize;
        let meta_len = read_u32(&mut inner, "metadata length")? as usize;
        let mut meta = Vec::new();
        (&mut inner).take(meta_len as u64).read_to_end(&mut meta)?;
        if meta.len() != meta_len {
            return Err(StoreError::Truncated("metadata"));
        }
        let metadata = Metadata::decode(&meta)?;
        let has_ground_truth = flags & FLAG_GROUND_TRUTH != 0;
        if metadata.get(KEY_GROUND_TRUTH) != Some(if has_ground_truth { "true" } else { "false" }) {
            return Err(StoreError::Metadata("ground_truth entry disagrees with flags".into()));
        }
        let lengths = if flags & FLAG_RAGGED != 0 {
            read_u32_vec(&mut inner, count, "sample counts")?
        } else {
            vec![read_u32(&mut inner, "sample count")?; count]
        };
        let image_indices = read_u32_vec(&mut inner, count, "image indices")?;
        Ok(Self {
            inner,
            metadata,
            has_ground_truth,
            lengths,
            image_indices,
            next: 0,
        })
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    pub fn trace_count(&self) -> usize {
        self.lengths.len()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.has_ground_truth
    }

    fn read_samples(&mut self) -> Result<Option<Trace>, StoreError> {
        if self.next >= self.lengths.len() {
            return Ok(None);
        }
        let len = self.lengths[self.next] as usize;
        let mut bytes = vec![0u8; len * 4];
        read_exact_or(&mut self.inner, &mut bytes, "samples")?;
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let trace = Trace {
            samples,
            image_index: self.image_indices[self.next],
            ground_truth: None,
        };
        self.next += 1;
        Ok(Some(trace))
    }

    /// Reads the remainder of the file, ground truth included, and checks
    /// that nothing follows it.
    pub fn read_all(mut self) -> Result<(TraceSet, Metadata), StoreError> {
        let mut traces = Vec::with_capacity(self.lengths.len() - self.next);
        while let Some(t) = self.read_samples()? {
            traces.push(t);
        }
        if self.has_ground_truth {
            for t in &mut traces {
                let n = read_u32(&mut self.inner, "ground-truth count")? as usize;
                let mut codes = vec![0u8; n];
                read_exact_or(&mut self.inner, &mut codes, "ground-truth labels")?;
                let labels = codes
                    .into_iter()
                    .map(|c| ImportanceLabel::from_code(c).ok_or(StoreError::Label(c)))
                    .collect::<Result<Vec<_>, _>>()?;
                t.ground_truth = Some(labels);
            }
        }
        expect_eof(&mut self.inner)?;
        Ok((TraceSet::new(traces), self.metadata))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<Trace, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_samples().transpose()
    }
}

pub fn decode_traces<R: Read>(r: R) -> Result<(TraceSet, Metadata), StoreError> {
    TraceReader::new(r)?.read_all()
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<(TraceSet, Metadata), StoreError> {
    TraceReader::open(path)?.read_all()
}

pub fn encode_images<W: Write>(w: &mut W, images: &ImageSet) -> Result<(), StoreError> {
    w.write_all(IMAGE_MAGIC)?;
    w.write_all(&to_u32(images.len(), "image count")?.to_le_bytes())?;
    w.write_all(&to_u32(images.pixel_count(), "pixel count")?.to_le_bytes())?;
    w.write_all(images.as_bytes())?;
    Ok(())
}

pub fn decode_images<R: Read>(mut r: R) -> Result<ImageSet, StoreError> {
    read_magic(&mut r, IMAGE_MAGIC)?;
    let count = read_u32(&mut r, "image count")? as usize;
    let pixels = read_u32(&mut r, "pixel count")? as usize;
    let total = count.checked_mul(pixels).ok_or(StoreError::TooLarge("image payload"))?;
    let mut bytes = Vec::new();
    (&mut r).take(total as u64).read_to_end(&mut bytes)?;
    if bytes.len() != total {
        return Err(StoreError::Truncated("pixels"));
    }
    expect_eof(&mut r)?;
    ImageSet::new(pixels, bytes).map_err(|e| StoreError::Metadata(e.to_string()))
}

pub fn write_images(path: impl AsRef<Path>, images: &ImageSet) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_images(&mut w, images)?;
    w.flush()?;
    Ok(())
}

pub fn read_images(path: impl AsRef<Path>) -> Result<ImageSet, StoreError> {
    decode_images(BufReader::new(File::open(path)?))
}

pub fn encode_skip_table<W: Write>(w: &mut W, table: &SkipTable) -> Result<(), StoreError> {
    w.write_all(SKIP_MAGIC)?;
    w.write_all(&to_u32(table.trace_count(), "trace count")?.to_le_bytes())?;
    w.write_all(&to_u32(table.width(), "width")?.to_le_bytes())?;
    w.write_all(&table.as_slice().iter().map(|&b| u8::from(b)).collect::<Vec<_>>())?;
    Ok(())
}

pub fn decode_skip_table<R: Read>(mut r: R) -> Result<SkipTable, StoreError> {
    read_magic(&mut r, SKIP_MAGIC)?;
    let count = read_u32(&mut r, "trace count")? as usize;
    let width = read_u32(&mut r, "width")? as usize;
    let total = count.checked_mul(width).ok_or(StoreError::TooLarge("skip table"))?;
    let mut bytes = Vec::new();
    (&mut r).take(total as u64).read_to_end(&mut bytes)?;
    if bytes.len() != total {
        return Err(StoreError::Truncated("skip decisions"));
    }
    expect_eof(&mut r)?;
    let decisions = bytes
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(StoreError::Metadata(format!("skip decision byte {other}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    SkipTable::new(width, decisions).map_err(|e| StoreError::Metadata(e.to_string()))
}

pub fn write_skip_table(path: impl AsRef<Path>, table: &SkipTable) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_skip_table(&mut w, table)?;
    w.flush()?;
    Ok(())
}

pub fn read_skip_table(path: impl AsRef<Path>) -> Result<SkipTable, StoreError> {
    decode_skip_table(BufReader::new(File::open(path)?))
}

/// Templates go into a trace container, one trace per template with the
/// label code as image index. Samples are stored as f32.
pub fn write_templates(path: impl AsRef<Path>, lib: &PatternLibrary, metadata: &Metadata) -> Result<(), StoreError> {
    let mut metadata = metadata.clone().with(KEY_KIND, "templates")?;
    let mut traces = Vec::new();
    for t in lib.iter() {
        if let Some(off) = t.leak_offset {
            metadata.insert(format!("leak_offset.{}", t.label), off)?;
        }
        traces.push(Trace {
            samples: t.samples.iter().map(|&s| s as f32).collect(),
            image_index: u32::from(t.label.code()),
            ground_truth: None,
        });
    }
    write_traces(path, &TraceSet::new(traces), &metadata)
}

pub fn read_templates(path: impl AsRef<Path>) -> Result<(PatternLibrary, Metadata), StoreError> {
    let (set, metadata) = read_traces(path)?;
    if metadata.get(KEY_KIND) != Some("templates") {
        return Err(StoreError::Metadata("container does not hold templates".into()));
    }
    let mut templates = Vec::new();
    for t in set.iter() {
        let code = u8::try_from(t.image_index).map_err(|_| StoreError::Label(u8::MAX))?;
        let label = ImportanceLabel::from_code(code).ok_or(StoreError::Label(code))?;
        let leak_offset = match metadata.get(&format!("leak_offset.{label}")) {
            Some(_) => Some(metadata.parse(&format!("leak_offset.{label}"))?),
            None => None,
        };
        let samples = t.samples.iter().map(|&s| f64::from(s)).collect();
        templates
            .push(PatternTemplate::new(label, samples, leak_offset).map_err(|e| StoreError::Metadata(e.to_string()))?);
    }
    let lib = PatternLibrary::new(templates).map_err(|e| StoreError::Metadata(e.to_string()))?;
    Ok((lib, metadata))
}

/// Aligned rows go into a fixed-length trace container. Block layout is kept
/// in metadata; `image_indices[n]` is the source image of row `n`.
pub fn write_aligned(
    path: impl AsRef<Path>,
    aligned: &AlignedTraceSet,
    image_indices: &[u32],
    metadata: &Metadata,
) -> Result<(), StoreError> {
    if image_indices.len() != aligned.len() {
        return Err(StoreError::Metadata(format!(
            "{} image indices for {} rows",
            image_indices.len(),
            aligned.len()
        )));
    }
    let pixels: Vec<String> = aligned.block_pixels.iter().map(usize::to_string).collect();
    let metadata = metadata
        .clone()
        .with(KEY_KIND, "aligned")?
        .with("block_len", aligned.block_len)?
        .with("block_pixels", pixels.join(","))?;
    let traces = aligned
        .rows
        .iter()
        .zip(image_indices)
        .map(|(row, &image_index)| Trace {
            samples: row.clone(),
            image_index,
            ground_truth: None,
        })
        .collect();
    write_traces(path, &TraceSet::new(traces), &metadata)
}

pub fn read_aligned(path: impl AsRef<Path>) -> Result<(AlignedTraceSet, Vec<u32>, Metadata), StoreError> {
    let (set, metadata) = read_traces(path)?;
    if metadata.get(KEY_KIND) != Some("aligned") {
        return Err(StoreError::Metadata("container does not hold aligned rows".into()));
    }
    let block_len = metadata.parse("block_len")?;
    let raw = metadata.require("block_pixels")?;
    let block_pixels = if raw.is_empty() {
        Vec::new()
    } else {
        raw.split(',')
            .map(|p| {
                p.parse()
                    .map_err(|_| StoreError::Metadata(format!("bad block pixel {p:?}")))
            })
            .collect::<Result<Vec<usize>, _>>()?
    };
    let indices = set.iter().map(|t| t.image_index).collect();
    let rows = set.traces.into_iter().map(|t| t.samples).collect();
    Ok((
        AlignedTraceSet {
            block_len,
            block_pixels,
            rows,
        },
        indices,
        metadata,
    ))
}

/// Column order of [`export_ge_csv`].
pub const GE_CSV_HEADER: [&str; 4] = ["weight_index", "trace_count", "ge_bits", "experiment_count"];

pub fn write_ge_csv<W: Write>(w: W, curves: &[GeCurve]) -> Result<(), StoreError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(GE_CSV_HEADER)?;
    for c in curves {
        for p in &c.points {
            out.write_record([
                c.weight_index.to_string(),
                p.trace_count.to_string(),
                format!("{:.6}", p.ge_bits),
                c.experiment_count.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn export_ge_csv(path: impl AsRef<Path>, curves: &[GeCurve]) -> Result<(), StoreError> {
    write_ge_csv(BufWriter::new(File::create(path)?), curves)
}

/// Serializes any row type with the csv crate (header from field names).
pub fn export_rows_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T], header: &[&str]) -> Result<(), StoreError> {
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path)?));
    out.write_record(header)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
