// SPDX-License-Identifier: Apache-2.0

use std::fs;

use anyhow::{Context, Result};
use pruneleak_core::cpa::{guessing_entropy, AttackConfig, RankTracker};
use pruneleak_core::experiment::{
    all_targets, calibrate, cff_study, classification_library, important_targets, label_error_rate, preprocess_neuron,
    processed_segment_len, RawAttack, TargetRun, SIM_BATCH,
};
use pruneleak_core::patterns::{classify_set, MatchConfig, PatternLibrary};
use pruneleak_core::tracestore::{
    export_ge_csv, export_rows_csv, read_aligned, read_images, read_templates, read_traces, write_aligned,
    write_images, write_skip_table, write_templates, write_traces, Metadata, TraceReader, KEY_CONFIG_HASH,
};
use pruneleak_core::{ExperimentSpec, PipelineError, Simulator, Target, TargetResult, TraceSet, Variant};
use serde::{Deserialize, Serialize};

use crate::artifacts::*;

pub struct Ctx {
    pub spec: ExperimentSpec,
    pub layout: Layout,
}

impl Ctx {
    fn hash(&self) -> Result<String> {
        Ok(self.spec.config_hash()?)
    }

    fn check(&self, meta: &Metadata) -> Result<()> {
        meta.check_config_hash(&self.hash()?)?;
        Ok(())
    }

    /// Attacker view of experiment `e`: samples and image indices only.
    fn attacker_traces(&self, e: usize) -> Result<TraceSet> {
        let path = require(&self.layout, &attacker_file(e))?;
        let reader = TraceReader::open(&path)?;
        self.check(reader.metadata())?;
        Ok(TraceSet::new(reader.collect::<Result<_, _>>()?))
    }

    fn match_config(&self) -> Result<(PatternLibrary, MatchConfig)> {
        let (lib, meta) = read_templates(require(&self.layout, TEMPLATES_FILE)?)?;
        self.check(&meta)?;
        let threshold: f64 = meta.parse("threshold")?;
        Ok((lib, MatchConfig::new(threshold, self.spec.attack.metric)?))
    }

    fn experiments(&self) -> std::ops::Range<usize> {
        0..self.spec.experiment_count
    }
}

pub fn simulate(ctx: &Ctx) -> Result<()> {
    let spec = &ctx.spec;
    let layout = &ctx.layout;
    let lib = PatternLibrary::reference();
    let neurons = spec.neurons()?;
    fs::create_dir_all(&layout.root)?;
    let mut manifest = Manifest {
        config_hash: ctx.hash()?,
        ..Manifest::default()
    };
    fs::write(layout.path("spec.toml"), spec.to_toml_string()?)?;
    manifest.record(layout, "spec.toml")?;
    for e in ctx.experiments() {
        fs::create_dir_all(layout.path(&format!("exp{e}")))?;
        let images = spec.images(e)?;
        let (mut traces, skips) = Simulator::new(&neurons, &spec.sim_config(e), &lib)?.run(&images)?;
        let meta = metadata(spec, e)?;
        write_traces(layout.path(&traces_file(e)), &traces, &meta)?;
        traces.strip_ground_truth();
        write_traces(layout.path(&attacker_file(e)), &traces, &meta)?;
        write_images(layout.path(&images_file(e)), &images)?;
        write_skip_table(layout.path(&skips_file(e)), &skips)?;
        for rel in [traces_file(e), attacker_file(e), images_file(e), skips_file(e)] {
            manifest.record(layout, &rel)?;
        }
        let samples: usize = traces.iter().map(|t| t.samples.len()).sum();
        println!(
            "experiment {e}: {} traces of {} neurons, {samples} samples",
            traces.len(),
            neurons.len()
        );
    }
    manifest.save(layout)?;
    println!("config hash {}", manifest.config_hash);
    Ok(())
}

#[derive(Serialize)]
struct CalibrationRow {
    metric: String,
    threshold: f64,
    training_error_rate: f64,
    calibrated: bool,
}

pub fn calibrate_cmd(ctx: &Ctx) -> Result<()> {
    let lib = PatternLibrary::reference();
    let cal = calibrate(&ctx.spec, &lib)?;
    let threshold = ctx.spec.attack.threshold.unwrap_or(cal.config.threshold);
    let meta = Metadata::new()
        .with(KEY_CONFIG_HASH, ctx.hash()?)?
        .with("threshold", threshold)?
        .with("metric", ctx.spec.attack.metric)?;
    let mut manifest = Manifest::open(&ctx.layout, &ctx.spec)?;
    fs::create_dir_all(&ctx.layout.root)?;
    write_templates(ctx.layout.path(TEMPLATES_FILE), &lib, &meta)?;
    let row = CalibrationRow {
        metric: ctx.spec.attack.metric.to_string(),
        threshold,
        training_error_rate: cal.error_rate,
        calibrated: ctx.spec.attack.threshold.is_none(),
    };
    export_rows_csv(
        ctx.layout.path(CALIBRATION_CSV),
        &[row],
        &["metric", "threshold", "training_error_rate", "calibrated"],
    )?;
    manifest.record(&ctx.layout, TEMPLATES_FILE)?;
    manifest.record(&ctx.layout, CALIBRATION_CSV)?;
    manifest.save(&ctx.layout)?;
    println!(
        "threshold {threshold:.4} ({}), training label error {:.5}",
        ctx.spec.attack.metric, cal.error_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct ClassificationRow {
    experiment: usize,
    traces: usize,
    unmatched_samples: usize,
    /// Empty when no ground-truth file is available.
    label_error_rate: Option<f64>,
}

pub fn classify(ctx: &Ctx) -> Result<()> {
    let (lib, cfg) = ctx.match_config()?;
    let class_lib = classification_library(&lib, ctx.spec.sim.variant);
    let mut manifest = Manifest::open(&ctx.layout, &ctx.spec)?;
    let mut rows = Vec::new();
    for e in ctx.experiments() {
        let traces = ctx.attacker_traces(e)?;
        let seqs = classify_set(&traces, &class_lib, &cfg);
        write_classified(&ctx.layout.path(&classified_file(e)), &seqs)?;
        manifest.record(&ctx.layout, &classified_file(e))?;
        // Scoring against ground truth uses the separate evaluation file.
        let truth_path = ctx.layout.path(&traces_file(e));
        let error = if truth_path.exists() {
            let (full, meta) = read_traces(&truth_path)?;
            ctx.check(&meta)?;
            label_error_rate(&full, &seqs)
        } else {
            None
        };
        let row = ClassificationRow {
            experiment: e,
            traces: seqs.len(),
            unmatched_samples: seqs.iter().map(|s| s.unmatched_samples).sum(),
            label_error_rate: error,
        };
        println!(
            "experiment {e}: {} traces classified, label error {}",
            row.traces,
            error.map_or("n/a".into(), |v| format!("{v:.5}"))
        );
        rows.push(row);
    }
    export_rows_csv(
        ctx.layout.path(CLASSIFICATION_CSV),
        &rows,
        &["experiment", "traces", "unmatched_samples", "label_error_rate"],
    )?;
    manifest.record(&ctx.layout, CLASSIFICATION_CSV)?;
    manifest.save(&ctx.layout)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PreprocessRow {
    experiment: usize,
    neuron: usize,
    retained: usize,
    discarded: usize,
    partition_count: usize,
    retained_fraction: f64,
    row_len: usize,
}

pub fn preprocess(ctx: &Ctx) -> Result<()> {
    let mut manifest = Manifest::open(&ctx.layout, &ctx.spec)?;
    let mut rows = Vec::new();
    for e in ctx.experiments() {
        let traces = ctx.attacker_traces(e)?;
        let seqs = read_classified(&require(&ctx.layout, &classified_file(e))?, traces.len())?;
        let images = read_images(require(&ctx.layout, &images_file(e))?)?;
        let meta = metadata(&ctx.spec, e)?;
        for k in 0..ctx.spec.layer.neuron_count {
            let view = preprocess_neuron(&traces, &seqs, &images, k)?;
            write_aligned(
                ctx.layout.path(&aligned_file(e, k)),
                &view.aligned,
                &view.image_indices,
                &meta.clone().with("neuron", k)?,
            )?;
            write_images(ctx.layout.path(&filtered_file(e, k)), &view.filtered)?;
            manifest.record(&ctx.layout, &aligned_file(e, k))?;
            manifest.record(&ctx.layout, &filtered_file(e, k))?;
            rows.push(PreprocessRow {
                experiment: e,
                neuron: k,
                retained: view.partition.retained.len(),
                discarded: view.partition.discarded.len(),
                partition_count: view.partition.partition_count,
                retained_fraction: view.partition.retained_fraction(),
                row_len: view.aligned.row_len(),
            });
        }
        let mean = rows
            .iter()
            .filter(|r| r.experiment == e)
            .map(|r| r.retained_fraction)
            .sum::<f64>()
            / ctx.spec.layer.neuron_count as f64;
        println!("experiment {e}: mean retained fraction {mean:.3}");
    }
    export_rows_csv(
        ctx.layout.path(PREPROCESS_CSV),
        &rows,
        &[
            "experiment",
            "neuron",
            "retained",
            "discarded",
            "partition_count",
            "retained_fraction",
            "row_len",
        ],
    )?;
    manifest.record(&ctx.layout, PREPROCESS_CSV)?;
    manifest.save(&ctx.layout)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Nominal windows on the captured traces.
    Raw,
    /// Blocks of the realigned traces from `preprocess`.
    Aligned,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Raw => "raw",
            Mode::Aligned => "aligned",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecoveredRow {
    pub neuron: usize,
    pub weight_index: usize,
    pub true_weight: i8,
    pub important: bool,
    pub final_ge: f64,
    pub converged_at: Option<usize>,
    pub recovered: bool,
    /// Top candidate of each experiment, space separated.
    pub best: String,
}

const RECOVERED_HEADER: [&str; 8] = [
    "neuron",
    "weight_index",
    "true_weight",
    "important",
    "final_ge",
    "converged_at",
    "recovered",
    "best",
];

fn raw_runs(ctx: &Ctx, targets: &[Target], schedule: &[usize]) -> Result<Vec<Vec<TargetRun>>> {
    let neurons = ctx.spec.neurons()?;
    let seg_len = processed_segment_len(&PatternLibrary::reference(), ctx.spec.sim.variant)?;
    let mut out = Vec::new();
    for e in ctx.experiments() {
        let images = read_images(require(&ctx.layout, &images_file(e))?)?;
        let mut reader = TraceReader::open(require(&ctx.layout, &attacker_file(e))?)?;
        ctx.check(reader.metadata())?;
        let mut attack = RawAttack::new(&neurons, targets, seg_len, schedule)?;
        loop {
            let batch: Vec<_> = reader.by_ref().take(SIM_BATCH).collect::<Result<_, _>>()?;
            if batch.is_empty() || attack.is_done() {
                break;
            }
            attack.feed(&TraceSet::new(batch), &images)?;
        }
        out.push(attack.finish()?);
    }
    Ok(out)
}

fn aligned_runs(ctx: &Ctx, targets: &[Target], schedule: &[usize]) -> Result<Vec<Vec<TargetRun>>> {
    let neurons = ctx.spec.neurons()?;
    let mut out = Vec::new();
    for e in ctx.experiments() {
        let mut runs = Vec::new();
        let mut loaded: Option<(usize, pruneleak_core::AlignedTraceSet, pruneleak_core::ImageSet)> = None;
        for t in targets {
            if loaded.as_ref().map_or(true, |(k, _, _)| *k != t.neuron) {
                let (aligned, _, meta) = read_aligned(require(&ctx.layout, &aligned_file(e, t.neuron))?)?;
                ctx.check(&meta)?;
                let filtered = read_images(require(&ctx.layout, &filtered_file(e, t.neuron))?)?;
                loaded = Some((t.neuron, aligned, filtered));
            }
            let Some((_, aligned, filtered)) = &loaded else {
                unreachable!()
            };
            let weights = &neurons[t.neuron].weights;
            let block = aligned.block_of_pixel(t.weight_index).ok_or_else(|| {
                PipelineError::Spec(format!(
                    "weight {} of neuron {} has no aligned block",
                    t.weight_index, t.neuron
                ))
            })?;
            let cfg = AttackConfig::for_weight(weights, t.weight_index, vec![aligned.block(block)]);
            let mut tracker =
                RankTracker::new(cfg, filtered.pixel_count(), weights[t.weight_index], schedule.to_vec())?;
            for (n, row) in aligned.rows.iter().enumerate() {
                if tracker.is_done() {
                    break;
                }
                tracker.push(filtered.image(n), filtered.image(n), row)?;
            }
            let best = tracker.ranking()?.best().unwrap_or(0);
            runs.push(TargetRun {
                ranks: tracker.finish()?,
                best,
            });
        }
        out.push(runs);
    }
    Ok(out)
}

/// Traces available to every experiment in `mode`.
fn available(ctx: &Ctx, mode: Mode, targets: &[Target]) -> Result<usize> {
    let mut min = usize::MAX;
    for e in ctx.experiments() {
        match mode {
            Mode::Raw => {
                min = min.min(TraceReader::open(require(&ctx.layout, &attacker_file(e))?)?.trace_count());
            }
            Mode::Aligned => {
                for t in targets {
                    let path = require(&ctx.layout, &aligned_file(e, t.neuron))?;
                    min = min.min(TraceReader::open(path)?.trace_count());
                }
            }
        }
    }
    Ok(min)
}

pub fn attack(ctx: &Ctx, mode: Mode, max_traces: Option<usize>) -> Result<()> {
    let targets = match mode {
        Mode::Raw => all_targets(&ctx.spec),
        Mode::Aligned => important_targets(&ctx.spec),
    };
    let mut manifest = Manifest::open(&ctx.layout, &ctx.spec)?;
    if targets.is_empty() {
        println!("no targets to attack");
        return Ok(());
    }
    let have = available(ctx, mode, &targets)?;
    let max = max_traces.unwrap_or(ctx.spec.trace_count).min(have);
    if max < 2 {
        return Err(PipelineError::Spec(format!("only {have} traces available")).into());
    }
    let schedule = ctx.spec.schedule(max);
    let runs = match mode {
        Mode::Raw => raw_runs(ctx, &targets, &schedule)?,
        Mode::Aligned => aligned_runs(ctx, &targets, &schedule)?,
    };
    let neurons = ctx.spec.neurons()?;
    let iapam = ctx.spec.iapam();
    let results: Vec<TargetResult> = targets
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let ranks: Vec<Vec<f64>> = runs.iter().map(|r| r[i].ranks.clone()).collect();
            Ok(TargetResult {
                target,
                true_weight: neurons[target.neuron].weights[target.weight_index],
                important: iapam.is_important(target.weight_index),
                curve: guessing_entropy(target.weight_index, &schedule, &ranks)?,
                best: runs.iter().map(|r| r[i].best).collect(),
            })
        })
        .collect::<Result<_, PipelineError>>()?;

    for k in 0..neurons.len() {
        let curves: Vec<_> = results
            .iter()
            .filter(|r| r.target.neuron == k)
            .map(|r| r.curve.clone())
            .collect();
        if curves.is_empty() {
            continue;
        }
        let rel = ge_file(mode.name(), k);
        export_ge_csv(ctx.layout.path(&rel), &curves)?;
        manifest.record(&ctx.layout, &rel)?;
    }
    let rows: Vec<RecoveredRow> = results
        .iter()
        .map(|r| RecoveredRow {
            neuron: r.target.neuron,
            weight_index: r.target.weight_index,
            true_weight: r.true_weight,
            important: r.important,
            final_ge: r.curve.final_ge().unwrap_or(f64::NAN),
            converged_at: r.curve.convergence_point(),
            recovered: r.recovered(),
            best: r.best.iter().map(i8::to_string).collect::<Vec<_>>().join(" "),
        })
        .collect();
    let rel = recovered_file(mode.name());
    export_rows_csv(ctx.layout.path(&rel), &rows, &RECOVERED_HEADER)?;
    manifest.record(&ctx.layout, &rel)?;
    manifest.save(&ctx.layout)?;

    println!("neuron weight true final_ge converged_at best");
    for r in &rows {
        println!(
            "{:>6} {:>6} {:>4} {:>8.3} {:>12} {}",
            r.neuron,
            r.weight_index,
            r.true_weight,
            r.final_ge,
            r.converged_at.map_or("-".into(), |v| v.to_string()),
            r.best
        );
    }
    let hit = rows.iter().filter(|r| r.recovered).count();
    println!(
        "{} attack on {max} traces: recovered {hit}/{} weights ({:.1}%)",
        mode.name(),
        rows.len(),
        100.0 * hit as f64 / rows.len() as f64
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ReportRow {
    pub mode: String,
    pub targets: usize,
    pub recovered: usize,
    pub recovered_pct: f64,
    pub important_targets: usize,
    pub important_recovered: usize,
    pub important_recovered_pct: f64,
}

fn pct(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

#[derive(Deserialize)]
struct ClassificationIn {
    label_error_rate: Option<f64>,
}

pub fn report(ctx: &Ctx) -> Result<()> {
    if ctx.layout.path(MANIFEST).exists() {
        Manifest::open(&ctx.layout, &ctx.spec)?;
    }
    let mut out = Vec::new();
    for mode in [Mode::Raw, Mode::Aligned] {
        let path = ctx.layout.path(&recovered_file(mode.name()));
        if !path.exists() {
            continue;
        }
        let rows: Vec<RecoveredRow> = csv::Reader::from_path(&path)?
            .deserialize()
            .collect::<Result<_, _>>()
            .with_context(|| format!("parsing {}", path.display()))?;
        if rows.is_empty() {
            continue;
        }
        let important: Vec<&RecoveredRow> = rows.iter().filter(|r| r.important).collect();
        let recovered = rows.iter().filter(|r| r.recovered).count();
        let imp_rec = important.iter().filter(|r| r.recovered).count();
        out.push(ReportRow {
            mode: mode.name().into(),
            targets: rows.len(),
            recovered,
            recovered_pct: pct(recovered, rows.len()),
            important_targets: important.len(),
            important_recovered: imp_rec,
            important_recovered_pct: pct(imp_rec, important.len()),
        });
    }
    fs::create_dir_all(&ctx.layout.root)?;
    export_rows_csv(
        ctx.layout.path(REPORT_CSV),
        &out,
        &[
            "mode",
            "targets",
            "recovered",
            "recovered_pct",
            "important_targets",
            "important_recovered",
            "important_recovered_pct",
        ],
    )?;
    if out.is_empty() {
        println!("no results: run `attack` first");
        return Ok(());
    }
    let class = ctx.layout.path(CLASSIFICATION_CSV);
    if class.exists() {
        let rates: Vec<f64> = csv::Reader::from_path(&class)?
            .deserialize::<ClassificationIn>()
            .filter_map(|r| r.ok().and_then(|r| r.label_error_rate))
            .collect();
        if !rates.is_empty() {
            println!(
                "classification error rate: {:.5}",
                rates.iter().sum::<f64>() / rates.len() as f64
            );
        }
    }
    let pre = ctx.layout.path(PREPROCESS_CSV);
    if pre.exists() {
        let fractions: Vec<f64> = csv::Reader::from_path(&pre)?
            .deserialize::<PreprocessRow>()
            .filter_map(|r| r.ok().map(|r| r.retained_fraction))
            .collect();
        if !fractions.is_empty() {
            println!(
                "retained partition fraction: {:.3}",
                fractions.iter().sum::<f64>() / fractions.len() as f64
            );
        }
    }
    for r in &out {
        println!(
            "{}: recovered {}/{} weights ({:.1}%), important {}/{} ({:.1}%)",
            r.mode,
            r.recovered,
            r.targets,
            r.recovered_pct,
            r.important_recovered,
            r.important_targets,
            r.important_recovered_pct
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CffRow {
    experiment: usize,
    derived: String,
    truth: String,
    false_positive_bits: usize,
    false_negative_bits: usize,
    traces_for_exact_recovery: Option<usize>,
    trace_count: usize,
}

pub fn cff(ctx: &Ctx) -> Result<()> {
    if ctx.spec.sim.variant != Variant::ControlFlowFree {
        return Err(PipelineError::Variant {
            expected: Variant::ControlFlowFree.to_string(),
            found: ctx.spec.sim.variant.to_string(),
        }
        .into());
    }
    let (lib, cfg) = ctx.match_config()?;
    let class_lib = classification_library(&lib, Variant::ControlFlowFree);
    let mut manifest = Manifest::open(&ctx.layout, &ctx.spec)?;
    let mut rows = Vec::new();
    for e in ctx.experiments() {
        let path = require(&ctx.layout, &attacker_file(e))?;
        let reader = TraceReader::open(&path)?;
        let found = reader.metadata().require("variant")?.to_owned();
        if found != Variant::ControlFlowFree.to_string() {
            return Err(PipelineError::Variant {
                expected: Variant::ControlFlowFree.to_string(),
                found,
            }
            .into());
        }
        ctx.check(reader.metadata())?;
        let traces = TraceSet::new(reader.collect::<Result<_, _>>()?);
        let seqs = classify_set(&traces, &class_lib, &cfg);
        let report = cff_study(&seqs, ctx.spec.layer.pixel_count, &ctx.spec.iapam())?;
        println!(
            "experiment {e}: derived {} truth {} ({} false positive, {} false negative bits; exact after {})",
            report.derived,
            report.truth,
            report.false_positive_bits,
            report.false_negative_bits,
            report
                .traces_for_exact_recovery
                .map_or("never".into(), |n| format!("{n} traces"))
        );
        rows.push(CffRow {
            experiment: e,
            derived: report.derived.to_string(),
            truth: report.truth.to_string(),
            false_positive_bits: report.false_positive_bits,
            false_negative_bits: report.false_negative_bits,
            traces_for_exact_recovery: report.traces_for_exact_recovery,
            trace_count: report.trace_count,
        });
    }
    export_rows_csv(
        ctx.layout.path(CFF_CSV),
        &rows,
        &[
            "experiment",
            "derived",
            "truth",
            "false_positive_bits",
            "false_negative_bits",
            "traces_for_exact_recovery",
            "trace_count",
        ],
    )?;
    manifest.record(&ctx.layout, CFF_CSV)?;
    manifest.save(&ctx.layout)?;
    Ok(())
}
