// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pruneleak_core::tracestore::{read_traces, write_traces, TraceReader};

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("spec.in.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_pruneleak"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

const SMALL: &str = "experiment_count = 1\ntrace_count = 1500\n";

#[test]
fn simulate_writes_requested_traces_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = "experiment_count = 1\ntrace_count = 10\n";
    ok(&run(a.path(), cfg, &["simulate"]));
    ok(&run(b.path(), cfg, &["simulate"]));
    let (set, meta) = read_traces(a.path().join("out/exp0/traces.trc")).unwrap();
    assert_eq!(set.len(), 10);
    assert!(set.has_ground_truth());
    // 5 neurons of 32 MACs each.
    assert_eq!(set.traces[0].ground_truth.as_ref().unwrap().len(), 160);
    assert!(meta.get("config_hash").is_some());
    assert!(!TraceReader::open(a.path().join("out/exp0/attacker.trc"))
        .unwrap()
        .has_ground_truth());
    let ma = fs::read(a.path().join("out/manifest.toml")).unwrap();
    let mb = fs::read(b.path().join("out/manifest.toml")).unwrap();
    assert_eq!(ma, mb);

    let c = tempfile::tempdir().unwrap();
    ok(&run(c.path(), &format!("seed = 9\n{cfg}"), &["simulate"]));
    assert_ne!(ma, fs::read(c.path().join("out/manifest.toml")).unwrap());
}

#[test]
fn circumvented_pipeline_recovers_important_weights() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), SMALL, &["simulate"]));
    ok(&run(dir.path(), SMALL, &["calibrate"]));
    let stdout = ok(&run(dir.path(), SMALL, &["classify"]));
    assert!(stdout.contains("label error 0.00000"), "{stdout}");
    ok(&run(dir.path(), SMALL, &["preprocess"]));
    let stdout = ok(&run(dir.path(), SMALL, &["attack", "--mode", "aligned"]));
    assert!(stdout.contains("recovered 25/25"), "{stdout}");
    let stdout = ok(&run(dir.path(), SMALL, &["report"]));
    assert!(stdout.contains("aligned: recovered 25/25 weights (100.0%)"), "{stdout}");

    let report = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert!(report.starts_with("mode,targets,recovered,recovered_pct,"));
    let ge = fs::read_to_string(dir.path().join("out/ge_aligned_n0.csv")).unwrap();
    assert!(ge.starts_with("weight_index,trace_count,ge_bits,experiment_count\n"));
    assert!(ge.ends_with('\n'));

    // Rerunning a stage with the same inputs leaves the manifest unchanged.
    let before = fs::read(dir.path().join("out/manifest.toml")).unwrap();
    ok(&run(dir.path(), SMALL, &["preprocess"]));
    assert_eq!(before, fs::read(dir.path().join("out/manifest.toml")).unwrap());
}

#[test]
fn classification_never_needs_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), SMALL, &["simulate"]));
    ok(&run(dir.path(), SMALL, &["calibrate"]));
    ok(&run(dir.path(), SMALL, &["classify"]));
    let with_truth = fs::read(dir.path().join("out/exp0/classified.csv")).unwrap();
    // Without the evaluation file the attacker path still runs and yields
    // the same labels.
    fs::remove_file(dir.path().join("out/exp0/traces.trc")).unwrap();
    let stdout = ok(&run(dir.path(), SMALL, &["classify"]));
    assert!(stdout.contains("label error n/a"), "{stdout}");
    assert_eq!(
        with_truth,
        fs::read(dir.path().join("out/exp0/classified.csv")).unwrap()
    );
}

#[test]
fn unprotected_zero_noise_raw_attack_ranks_every_weight_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "experiment_count = 1\ntrace_count = 1000\n[sim]\nnoise_sigma = 0.0\nvariant = \"unprotected\"\n";
    ok(&run(dir.path(), cfg, &["simulate"]));
    let stdout = ok(&run(dir.path(), cfg, &["attack", "--mode", "raw"]));
    assert!(stdout.contains("recovered 35/35"), "{stdout}");
}

#[test]
fn report_without_results_says_so() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&run(dir.path(), SMALL, &["report"]));
    assert!(stdout.contains("no results"));
    let csv = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn cff_study_derives_the_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "experiment_count = 1\ntrace_count = 200\n[sim]\nvariant = \"control_flow_free\"\n";
    ok(&run(dir.path(), cfg, &["simulate"]));
    ok(&run(dir.path(), cfg, &["calibrate"]));
    let stdout = ok(&run(dir.path(), cfg, &["cff-study"]));
    assert!(stdout.contains("0 false positive, 0 false negative"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("out/cff.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[1], fields[2]);
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let bad = run(dir.path(), "experiment_count = 0\n", &["simulate"]);
    assert_eq!(bad.status.code(), Some(3));

    let missing = run(dir.path(), SMALL, &["classify"]);
    assert_eq!(missing.status.code(), Some(4));

    ok(&run(dir.path(), SMALL, &["simulate"]));
    ok(&run(dir.path(), SMALL, &["calibrate"]));
    let other = run(
        dir.path(),
        "experiment_count = 1\ntrace_count = 1500\nseed = 3\n",
        &["classify"],
    );
    assert_eq!(
        other.status.code(),
        Some(5),
        "{}",
        String::from_utf8_lossy(&other.stderr)
    );

    let variant = run(dir.path(), SMALL, &["cff-study"]);
    assert_eq!(variant.status.code(), Some(6));

    // A trace file swapped in from another campaign is rejected too.
    let src = dir.path().join("out/exp0/attacker.trc");
    let (set, meta) = read_traces(&src).unwrap();
    let meta = meta.with("config_hash", "0".repeat(64)).unwrap();
    write_traces(&src, &set, &meta).unwrap();
    let swapped = run(dir.path(), SMALL, &["classify"]);
    assert_eq!(swapped.status.code(), Some(5));

    let usage = Command::new(env!("CARGO_BIN_EXE_pruneleak"))
        .arg("bogus")
        .output()
        .unwrap();
    assert_eq!(usage.status.code(), Some(2));
}
