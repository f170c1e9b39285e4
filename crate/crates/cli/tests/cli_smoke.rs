//! End-to-end smoke of the executable: every subcommand runs against a
//! tiny synthetic suite, and the exit-code contract holds.

use std::path::Path;
use std::process::{Command, Output};

fn nvguard(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvguard"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = nvguard(args, dir);
    assert!(
        out.status.success(),
        "nvguard {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn no_arguments_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvguard(&[], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvguard(&["hwcost", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvguard(&["annotate", "--in", "nope.csv", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn hwcost_prints_the_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["hwcost", "--model", "clt"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("442499"), "{text}");
    let out = ok(&["hwcost", "--model", "plt", "--format", "csv"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("17458690"), "{text}");
    assert!(text.contains("512000"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Tiny suite, fixed seed.
    ok(
        &[
            "synth", "--suite", "--out", "suite", "--benign", "6", "--ransomware", "6",
            "--commands", "800", "--seed", "5",
        ],
        root,
    );
    assert!(root.join("suite/train").is_dir());
    assert!(root.join("suite/eval").is_dir());

    // Single-stream generation plus the derived/token/embedding dumps.
    ok(
        &["synth", "--out", "one.csv", "--infected", "--family", "fam", "--seed", "9"],
        root,
    );
    assert!(root.join("one.csv.meta").exists());
    ok(&["annotate", "--in", "one.csv", "--out", "one.annotated.csv"], root);
    let annotated = std::fs::read_to_string(root.join("one.annotated.csv")).unwrap();
    assert!(annotated.starts_with("timestamp,opcode,offset,size,label,delta_t,ov_war"));

    let out = ok(&["slice", "--in", "one.csv", "--slice-commands", "500"], root);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.lines().count() > 2);

    ok(
        &["tokenize", "--in", "one.csv", "--out", "one.tokens", "--slice-commands", "500"],
        root,
    );
    let tokens = std::fs::read_to_string(root.join("one.tokens")).unwrap();
    let first_line: Vec<u32> = tokens
        .lines()
        .next()
        .unwrap()
        .split(' ')
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(first_line.len(), 500);
    assert!(first_line.iter().all(|&t| t < 1024));

    ok(
        &[
            "embed", "--in", "one.csv", "--out", "one.embed.csv", "--slice-commands", "500",
            "--patch-window", "100", "--patch-stride", "5",
        ],
        root,
    );
    let embed = std::fs::read_to_string(root.join("one.embed.csv")).unwrap();
    assert_eq!(embed.lines().next().unwrap().split(',').count(), 183);

    // Tabular training and prediction (fast even in debug builds).
    ok(
        &[
            "train", "--model", "rf", "--data", "suite/train", "--out", "rf.model",
            "--slice-commands", "400", "--seed", "3",
        ],
        root,
    );
    assert!(root.join("rf.model.pipeline").exists());
    ok(
        &["predict", "--model", "rf.model", "--in", "suite/eval", "--out", "rf.pred.csv"],
        root,
    );
    let pred = std::fs::read_to_string(root.join("rf.pred.csv")).unwrap();
    assert!(pred.starts_with("stream_id,slice_index,probability,truth"));

    // Identical invocation reproduces the bytes.
    ok(
        &["predict", "--model", "rf.model", "--in", "suite/eval", "--out", "rf.pred2.csv"],
        root,
    );
    let pred2 = std::fs::read_to_string(root.join("rf.pred2.csv")).unwrap();
    assert_eq!(pred, pred2);

    ok(
        &[
            "eval", "--pred", "rf.pred.csv", "--repeats", "5", "--report", "report.csv",
            "--mbd-cdf", "cdf.csv", "--seed", "2",
        ],
        root,
    );
    let report = std::fs::read_to_string(root.join("report.csv")).unwrap();
    assert!(report.starts_with("metric,value,sigma"));
    assert!(report.contains("mdr_percent"));
    let cdf = std::fs::read_to_string(root.join("cdf.csv")).unwrap();
    assert!(cdf.starts_with("mbd_mb,cdf"));

    // JSON mirror of the same report.
    let out = ok(
        &["eval", "--pred", "rf.pred.csv", "--repeats", "5", "--format", "json", "--seed", "2"],
        root,
    );
    let json = String::from_utf8_lossy(&out.stdout);
    assert!(json.contains("\"mdr\""));

    // Family-held-out fold assignments from the sidecar metadata.
    ok(
        &[
            "eval", "--group-folds", "3", "--meta-dir", "suite/eval", "--folds-out",
            "folds.csv", "--seed", "4",
        ],
        root,
    );
    let folds = std::fs::read_to_string(root.join("folds.csv")).unwrap();
    assert!(folds.starts_with("fold,role,stream_id"));
    assert!(folds.contains("ood_test"));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.conf"), "slice_commands=400\n").unwrap();
    ok(
        &["synth", "--out", "t.csv", "--commands", "800", "--seed", "8"],
        root,
    );
    // Flag says 100 commands per slice; the config file overrides to 400,
    // so 800 commands make 2 slices.
    let out = ok(
        &[
            "slice", "--in", "t.csv", "--slice-commands", "100", "--config", "run.conf",
        ],
        root,
    );
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 3, "{table}");
}
