//! The `sigver` binary: exit codes, error messages and reproducible output.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sigver::checkpoint::{self, CheckpointMeta};
use sigver_core::model::{ModelConfig, SiameseModel, Variant};

fn sigver(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sigver"))
        .args(args)
        .env("SIGVER_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, seed: &str) {
    let o = sigver(&[
        "synth", "--subjects", "4", "--genuine", "3", "--forgeries", "2", "--val-subjects", "2", "--seed", seed,
        "--out", p(dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

/// A reduced checkpoint claiming `trained_on` as its training subjects.
fn checkpoint_at(path: &Path, trained_on: &[&str]) {
    let config = ModelConfig::reduced(Variant::Vanilla, 256).with_seed(1);
    let model = SiameseModel::<f32>::new(config.clone()).unwrap();
    let meta = CheckpointMeta {
        model: config,
        training_subjects: trained_on.iter().map(|s| s.to_string()).collect(),
        optimizer: None,
        optimizer_step: 0,
        train_state: None,
    };
    checkpoint::save(path, &model, None, &meta).unwrap();
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(sigver(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(sigver(&["train"]).status.code(), Some(1));
    assert_eq!(sigver(&["synth", "--subjects", "x", "--genuine", "1", "--forgeries", "1", "--out", "o"]).status.code(), Some(1));
    assert_eq!(sigver(&["--help"]).status.code(), Some(0));
    assert_eq!(sigver(&["evaluate", "--help"]).status.code(), Some(0));
}

#[test]
fn missing_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.tsv");
    let o = sigver(&["extract", "--input", p(&missing), "--out", p(&dir.path().join("f.tsv"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent.tsv"));
}

#[test]
fn malformed_signatures_exit_one_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.tsv");
    fs::write(&input, "x\ty\ttimestamp_ms\tpressure\n0\t0\t0\t1\n1\t0\t10\t1\n2\t0\t5\t1\n").unwrap();
    let o = sigver(&["extract", "--input", p(&input), "--out", p(&dir.path().join("f.tsv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("non-monotonic timestamp at line 3"), "{}", stderr(&o));
}

#[test]
fn evaluating_training_subjects_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3");
    let comparisons = dir.path().join("pairs.json");
    let o = sigver(&["pairs", "--manifest", p(&dir.path().join("manifest.json")), "--count", "8", "--out", p(&comparisons)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = dir.path().join("m.ckpt");
    checkpoint_at(&model, &["s001"]);
    let o = sigver(&["evaluate", "--model", p(&model), "--manifest", p(&comparisons), "--out-dir", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("protocol error: overlapping subjects"), "{}", stderr(&o));
}

#[test]
fn train_refuses_overlapping_manifests() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "4");
    let m = dir.path().join("manifest.json");
    let o = sigver(&[
        "train", "--train-manifest", p(&m), "--val-manifest", p(&m), "--epochs", "1", "--out",
        p(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("protocol error: overlapping subjects"));
}

#[test]
fn repeated_runs_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), "5");
    synth(b.path(), "5");
    for name in ["manifest.json", "train_manifest.json", "val_manifest.json", "signatures/s000_g00.tsv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }

    let model = a.path().join("m.ckpt");
    checkpoint_at(&model, &["s000"]);
    let val = a.path().join("val_manifest.json");
    let comparisons = a.path().join("pairs.json");
    let o = sigver(&["pairs", "--manifest", p(&val), "--count", "8", "--seed", "2", "--out", p(&comparisons)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read(&comparisons).unwrap();
    sigver(&["pairs", "--manifest", p(&val), "--count", "8", "--seed", "2", "--out", p(&comparisons)]);
    assert_eq!(fs::read(&comparisons).unwrap(), first);

    let mut reports = Vec::new();
    for out in ["r1", "r2"] {
        let out = a.path().join(out);
        let o = sigver(&["--json", "evaluate", "--model", p(&model), "--manifest", p(&comparisons), "--out-dir", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        assert!(!files.is_empty());
        reports.push(files.iter().map(|f| (f.file_name().unwrap().to_owned(), fs::read(f).unwrap())).collect::<Vec<_>>());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn extract_and_align_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "6");
    let (g0, f0) = (dir.path().join("signatures/s000_g00.tsv"), dir.path().join("signatures/s000_f00.tsv"));
    let feats = dir.path().join("g0.features.tsv");
    let o = sigver(&["--json", "extract", "--input", p(&g0), "--out", p(&feats)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["channels"], 23);
    assert!(fs::read_to_string(&feats).unwrap().starts_with("x\ty\tpressure"));

    let pair = dir.path().join("pair.bin");
    let o = sigver(&[
        "align", "--enrolled", p(&g0), "--questioned", p(&f0), "--label", "nonmatch_skilled", "--out", p(&pair),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let back = sigver::aligned::decode(&fs::read(&pair).unwrap(), &pair).unwrap();
    assert_eq!(back.label, Some(sigver_core::dtw::PairLabel::NonmatchSkilled));
}
