// SPDX-License-Identifier: Apache-2.0

//! Output directory layout, manifest and the classification CSV.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pruneleak_core::label::ImportanceLabel;
use pruneleak_core::patterns::{ClassifiedSequence, Entry};
use pruneleak_core::tracestore::{Metadata, KEY_CONFIG_HASH};
use pruneleak_core::{ExperimentSpec, StoreError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.toml";

/// Artifact paths below the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exp(e: usize, name: &str) -> String {
        format!("exp{e}/{name}")
    }
}

/// Full traces, ground truth included (for evaluation only).
pub fn traces_file(e: usize) -> String {
    Layout::exp(e, "traces.trc")
}

/// The same traces with ground truth stripped; the attack stages read these.
pub fn attacker_file(e: usize) -> String {
    Layout::exp(e, "attacker.trc")
}

pub fn images_file(e: usize) -> String {
    Layout::exp(e, "images.img")
}

pub fn skips_file(e: usize) -> String {
    Layout::exp(e, "skips.skp")
}

pub fn classified_file(e: usize) -> String {
    Layout::exp(e, "classified.csv")
}

pub fn aligned_file(e: usize, neuron: usize) -> String {
    Layout::exp(e, &format!("aligned_n{neuron}.trc"))
}

pub fn filtered_file(e: usize, neuron: usize) -> String {
    Layout::exp(e, &format!("filtered_n{neuron}.img"))
}

pub const TEMPLATES_FILE: &str = "templates.trc";
pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const CLASSIFICATION_CSV: &str = "classification.csv";
pub const PREPROCESS_CSV: &str = "preprocess.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const CFF_CSV: &str = "cff.csv";

pub fn ge_file(mode: &str, neuron: usize) -> String {
    format!("ge_{mode}_n{neuron}.csv")
}

pub fn recovered_file(mode: &str) -> String {
    format!("recovered_{mode}.csv")
}

/// Config hash plus the SHA-256 of every file a stage produced.
#[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    #[serde(default)]
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    /// Loads the manifest, or starts a fresh one for `spec`. An existing
    /// manifest written for another configuration is an error.
    pub fn open(layout: &Layout, spec: &ExperimentSpec) -> Result<Self> {
        let hash = spec.config_hash()?;
        let path = layout.path(MANIFEST);
        if !path.exists() {
            return Ok(Self {
                config_hash: hash,
                files: BTreeMap::new(),
            });
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let manifest: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if manifest.config_hash != hash {
            return Err(StoreError::ConfigMismatch {
                left: manifest.config_hash,
                right: hash,
            }
            .into());
        }
        Ok(manifest)
    }

    pub fn record(&mut self, layout: &Layout, rel: &str) -> Result<()> {
        self.files.insert(rel.to_owned(), sha256_file(&layout.path(rel))?);
        Ok(())
    }

    pub fn save(&self, layout: &Layout) -> Result<()> {
        fs::write(layout.path(MANIFEST), toml::to_string(self)?)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn require(layout: &Layout, rel: &str) -> Result<PathBuf> {
    let path = layout.path(rel);
    if !path.exists() {
        return Err(StoreError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing artifact {} (run the earlier stage first)", path.display()),
        ))
        .into());
    }
    Ok(path)
}

pub fn metadata(spec: &ExperimentSpec, e: usize) -> Result<Metadata> {
    Ok(Metadata::new()
        .with(KEY_CONFIG_HASH, spec.config_hash()?)?
        .with("experiment", e)?
        .with("seed", spec.seed)?
        .with("variant", spec.sim.variant)?)
}

/// One classified entry per CSV row.
#[derive(Debug, Serialize, Deserialize)]
struct EntryRow {
    trace: usize,
    start: usize,
    label: ImportanceLabel,
    length: usize,
}

pub fn write_classified(path: &Path, seqs: &[ClassifiedSequence]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    for (trace, seq) in seqs.iter().enumerate() {
        for e in &seq.entries {
            out.serialize(EntryRow {
                trace,
                start: e.start,
                label: e.label,
                length: e.length,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads back [`write_classified`] output for `trace_count` traces.
pub fn read_classified(path: &Path, trace_count: usize) -> Result<Vec<ClassifiedSequence>> {
    let mut seqs = vec![ClassifiedSequence::default(); trace_count];
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: EntryRow = row.with_context(|| format!("parsing {}", path.display()))?;
        let Some(seq) = seqs.get_mut(row.trace) else {
            bail!(StoreError::Metadata(format!(
                "{} names trace {} of {trace_count}",
                path.display(),
                row.trace
            )));
        };
        seq.entries.push(Entry {
            start: row.start,
            label: row.label,
            length: row.length,
        });
    }
    Ok(seqs)
}
