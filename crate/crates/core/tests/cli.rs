use std::path::Path;
use std::process::{Command, Output};

use cumadapt::container::{load_model, AcousticModelFile};
use cumadapt::corpus::read_archive;

const SMALL: &str = "\
[corpus]
num_speakers = 4
utterances_per_speaker = 4
min_frames = 30
max_frames = 40
feature_dim = 8
num_classes = 6

[test]
num_speakers = 2
utterances_per_speaker = 3

[ivector]
ubm_components = 4
ubm_iterations = 3
vad_iterations = 3
rank = 4
tv_iterations = 3

[am]
layers = 8,8,8
max_epochs = 3

[adapt]
max_epochs = 2

[report]
ranks = 2,3
";

fn cumadapt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cumadapt")).args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = cumadapt(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.ini"), SMALL).unwrap();
    dir
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(cumadapt(&[], d).status.code(), Some(2));
    assert_eq!(cumadapt(&["frobnicate"], d).status.code(), Some(2));
    assert_eq!(cumadapt(&["evaluate", "--bogus"], d).status.code(), Some(2));
    assert_eq!(
        cumadapt(&["adapt", "--data", "x", "--model", "y", "--partition", "city"], d)
            .status
            .code(),
        Some(2)
    );
    assert_eq!(cumadapt(&["--help"], d).status.code(), Some(0));

    let out = cumadapt(&["evaluate", "--data", "missing.manifest", "--model", "am.amdl"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: evaluate: "), "{err}");
    assert!(err.contains("missing.manifest"), "{err}");

    std::fs::write(d.join("bad.ini"), "[ivector]\nrnak = 3\n").unwrap();
    let out = cumadapt(&["gen-corpus", "--config", "bad.ini"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rnak"));
}

#[test]
fn sqrt_normalized_ivectors_have_norm_sqrt_rank() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-corpus"], d);
    ok(&["extract-ivectors", "--data", "train.manifest", "--norm", "sqrt", "--rank", "10"], d);
    let entries = read_archive(&d.join("train.ivectors.farc")).unwrap();
    assert_eq!(entries.len(), 200);
    for e in &entries {
        assert_eq!((e.rows, e.cols), (1, 10));
        let norm = e.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 10f64.sqrt()).abs() < 1e-10, "{}: {norm}", e.id);
    }
    let log = std::fs::read_to_string(d.join("extract-ivectors.log")).unwrap();
    assert!(log.contains("rank = 10") && log.contains("normalization = sqrt"), "{log}");
}

#[test]
fn staged_pipeline_adapts_and_evaluates() {
    let dir = small_dir();
    let d = dir.path();
    fn with<'a>(args: &[&'a str]) -> Vec<&'a str> {
        [args, &["--config", "small.ini"][..]].concat()
    }
    ok(&with(&["gen-corpus"]), d);
    ok(&with(&["train-vad", "--data", "train.manifest"]), d);
    ok(&with(&["train-ubm", "--data", "train.manifest"]), d);
    ok(&with(&["train-tv", "--data", "train.manifest", "--models", "."]), d);
    for set in ["train", "test"] {
        ok(
            &with(&["extract-ivectors", "--data", &format!("{set}.manifest"), "--models", ".", "--norm", "rg"]),
            d,
        );
    }
    let iv = ["--ivectors", "on", "--ivector-archive"];
    ok(
        &with(&[&["train-am", "--data", "train.manifest"][..], &iv, &["train.ivectors.farc"]].concat()),
        d,
    );
    let adapt = ok(
        &with(
            &[
                &[
                    "adapt",
                    "--data",
                    "test.manifest",
                    "--model",
                    "am.amdl",
                    "--partition",
                    "environment",
                    "--positions",
                    "1",
                ][..],
                &iv,
                &["test.ivectors.farc"],
            ]
            .concat(),
        ),
        d,
    );
    assert!(adapt.contains("partition=environment position=1 subset=all fer="), "{adapt}");

    let adapted: AcousticModelFile = load_model(&d.join("adapted.amdl")).unwrap();
    let base: AcousticModelFile = load_model(&d.join("am.amdl")).unwrap();
    assert_eq!(adapted.model.base_fingerprint(), base.model.base_fingerprint());
    assert_eq!(adapted.model.positions_for("ch"), vec![1]);

    let eval = ok(
        &with(
            &[
                &[
                    "evaluate",
                    "--data",
                    "test.manifest",
                    "--model",
                    "adapted.amdl",
                    "--partition",
                    "environment",
                ][..],
                &iv,
                &["test.ivectors.farc"],
            ]
            .concat(),
        ),
        d,
    );
    assert!(eval.starts_with("partition: environment\nposition: 1\n"), "{eval}");
    // evaluation reproduces the post-adaptation scores
    let after = adapt.split("# after adaptation\n").nth(1).unwrap();
    assert_eq!(eval, after);

    let missing = cumadapt(&with(&["train-am", "--data", "train.manifest", "--ivectors", "on"]), d);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn outputs_reproduce_from_the_echoed_config() {
    let dir = small_dir();
    let d = dir.path();
    ok(&["gen-corpus", "--config", "small.ini", "--seed", "11", "--out", "a"], d);
    let log = d.join("a/gen-corpus.log");
    assert!(std::fs::read_to_string(&log).unwrap().contains("# seeds: corpus=11"));
    ok(&["gen-corpus", "--config", log.to_str().unwrap(), "--out", "b"], d);
    for f in ["train.feats.farc", "train.labels.farc", "test.feats.farc", "train.manifest"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    ok(&["gen-corpus", "--config", "small.ini", "--seed", "12", "--out", "c"], d);
    assert_ne!(
        std::fs::read(d.join("a/train.feats.farc")).unwrap(),
        std::fs::read(d.join("c/train.feats.farc")).unwrap()
    );
}

#[test]
fn normalization_grid_layout() {
    let dir = small_dir();
    let d = dir.path();
    let text = ok(&["report-grid", "--table", "ivector-norm", "--config", "small.ini", "--rank", "2,3"], d);
    let lines: Vec<&str> = text.lines().collect();
    let header: Vec<&str> = lines[2].split(" | ").map(str::trim).collect();
    assert_eq!(header, ["normalization", "2", "3"], "{text}");
    let labels: Vec<&str> = lines
        .iter()
        .skip(3)
        .filter(|l| !l.is_empty() && !l.chars().all(|c| c == '-'))
        .map(|l| l.split(" | ").next().unwrap().trim())
        .collect();
    assert_eq!(labels, ["NONE", "UNITY", "SQRT_D", "RG"]);
    let records = std::fs::read_to_string(d.join("report-ivector-norm.records")).unwrap();
    assert_eq!(records.lines().count(), 8);
    assert!(records.lines().all(|l| l.starts_with("table=ivector-norm normalization=")));
    assert!(!d.join("report-feature.txt").exists());
}
