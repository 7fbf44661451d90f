use std::path::Path;
use std::process::{Command, Output};

use mixsup::data::load_folds;
use mixsup::evaluation::load_report;
use mixsup::losses::read_loss_log;

fn mixsup(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixsup"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = mixsup(args, dir);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

fn prepare(dir: &Path) {
    ok(&["gen-data", "--out", "data", "--volumes", "20", "--seed", "3"], dir);
    ok(
        &[
            "folds",
            "--data",
            "data",
            "--num-test",
            "4",
            "--num-fa",
            "4",
            "--seed",
            "3",
            "--out",
            "folds",
        ],
        dir,
    );
}

const TRAIN: [&str; 10] = [
    "train",
    "--data",
    "data",
    "--folds",
    "folds/folds.json",
    "--iterations",
    "6",
    "--checkpoint-every",
    "2",
    "--mode",
];

#[test]
fn gen_data_prints_seeded_counts() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        &["gen-data", "--out", "d", "--volumes", "20", "--tumor-fraction", "0.8"],
        dir.path(),
    );
    assert!(
        stdout.contains("volumes 20 tumor_volumes 16 negative_volumes 4"),
        "{stdout}"
    );
}

#[test]
fn same_seed_gives_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        prepare(d);
        let mut args = TRAIN.to_vec();
        args.extend(["mixed", "--out", "run"]);
        ok(&args, d);
    }
    for f in [
        "data/manifest.jsonl",
        "data/generator.json",
        "folds/folds.json",
        "run/loss.csv",
        "run/model.msup",
    ] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f} differs");
    }
    let slice = "data/slices/v0003_s007.msvd";
    assert_eq!(read(a.path().join(slice)), read(b.path().join(slice)));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let mut args = TRAIN.to_vec();
    args.extend(["mixed", "--seed", "11", "--lr", "0.02", "--out", "first"]);
    ok(&args, d);
    ok(&["train", "--config", "first/config.json", "--out", "second"], d);
    assert_eq!(read(d.join("first/loss.csv")), read(d.join("second/loss.csv")));
    assert_eq!(read(d.join("first/config.json")), read(d.join("second/config.json")));

    ok(&["gen-data", "--config", "data/config.json", "--out", "data2"], d);
    assert_eq!(
        read(d.join("data/manifest.jsonl")),
        read(d.join("data2/manifest.jsonl"))
    );
    ok(&["folds", "--config", "folds/config.json", "--out", "folds2"], d);
    assert_eq!(read(d.join("folds/folds.json")), read(d.join("folds2/folds.json")));
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    ok(
        &[
            "folds",
            "--config",
            "folds/config.json",
            "--num-fa",
            "2",
            "--identity",
            "--out",
            "f2",
        ],
        d,
    );
    let plans = load_folds(&d.join("f2/folds.json")).unwrap();
    assert_eq!(plans[0].test_ids, vec![0, 1, 2, 3]);
    assert_eq!(plans[0].fa_ids, vec![4, 5]);
}

#[test]
fn standard_mode_never_reads_weak_slices() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let mut args = TRAIN.to_vec();
    args.extend(["standard", "--out", "std"]);
    let stdout = ok(&args, d);
    assert!(stdout.contains("reads_weak 0"), "{stdout}");
    let log = read_loss_log(&d.join("std/loss.csv")).unwrap();
    assert_eq!(log.len(), 6);
    assert!(log.iter().all(|r| r.total.to_bits() == r.loss_s.to_bits()));

    let mut args = TRAIN.to_vec();
    args.extend(["mixed", "--out", "mixed"]);
    let stdout = ok(&args, d);
    assert!(!stdout.contains("reads_weak 0"), "{stdout}");
}

#[test]
fn checkpoints_rotate_and_eval_reports_every_test_case() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let mut args = TRAIN.to_vec();
    args.extend(["mixed", "--keep-checkpoints", "2", "--out", "run"]);
    ok(&args, d);
    let mut cks: Vec<String> = std::fs::read_dir(d.join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("checkpoint_"))
        .collect();
    cks.sort();
    assert_eq!(cks, vec!["checkpoint_000004.msup", "checkpoint_000006.msup"]);

    ok(
        &[
            "eval",
            "--data",
            "data",
            "--folds",
            "folds/folds.json",
            "--checkpoint",
            "run/model.msup",
            "--out",
            "ev",
        ],
        d,
    );
    let report = load_report(&d.join("ev/report.json")).unwrap();
    let plans = load_folds(&d.join("folds/folds.json")).unwrap();
    assert_eq!(report.folds[0].cases.len(), plans[0].test_ids.len());
    assert!(d.join("ev/report.csv").exists() && d.join("ev/report.txt").exists());

    let out = ok(
        &[
            "compare",
            "--name",
            "FA=4",
            "--standard",
            "ev/report.json",
            "--mixed",
            "ev/report.json",
            "--out",
            "cmp",
        ],
        d,
    );
    assert!(out.contains("delta"), "{out}");
    let csv = String::from_utf8(read(d.join("cmp/comparison.csv"))).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn data_without_tumor_free_slices_aborts_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen-data",
            "--out",
            "data",
            "--volumes",
            "10",
            "--tumor-fraction",
            "1.0",
        ],
        d,
    );
    ok(
        &[
            "folds",
            "--data",
            "data",
            "--num-test",
            "2",
            "--num-fa",
            "2",
            "--out",
            "folds",
        ],
        d,
    );
    let manifest = d.join("data/manifest.jsonl");
    let text = String::from_utf8(read(&manifest)).unwrap();
    let kept: String = text
        .lines()
        .filter(|l| l.contains("\"full\""))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&manifest, kept).unwrap();
    let mut args = TRAIN.to_vec();
    args.extend(["mixed", "--out", "run"]);
    let out = mixsup(&args, d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("negative pool empty"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(mixsup(&["--help"], d).status.code(), Some(0));
    assert_eq!(mixsup(&["--version"], d).status.code(), Some(0));
    assert_eq!(mixsup(&[], d).status.code(), Some(1));
    assert_eq!(mixsup(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(
        mixsup(&["train", "--iterations", "x", "--out", "o"], d).status.code(),
        Some(1)
    );
    assert_eq!(mixsup(&["train", "--out", "o"], d).status.code(), Some(2));
    assert_eq!(
        mixsup(
            &["eval", "--data", "nowhere", "--out", "o", "--checkpoint", "none.msup"],
            d
        )
        .status
        .code(),
        Some(2)
    );
    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_eq!(
        mixsup(&["folds", "--config", "bad.json", "--out", "o"], d)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn gradcheck_lists_every_primitive_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--out", "gc"], dir.path());
    for op in [
        "conv2d",
        "mean_pool2d",
        "max_pool2d",
        "upsample_nearest",
        "batch_norm_train",
        "linear",
        "relu",
        "softmax",
        "cross_entropy_weighted",
        "cross_entropy_from_logits",
        "concat",
        "narrow",
        "reshape",
        "add",
        "mul",
        "scale",
        "sum",
        "composite_loss_binary",
        "composite_loss_multiclass",
    ] {
        assert!(
            stdout
                .lines()
                .any(|l| l.starts_with("PASS") && l.split_whitespace().nth(1) == Some(op)),
            "{op}"
        );
    }
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("gc/gradcheck.txt").exists());
}

#[test]
fn gradcheck_failure_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = mixsup(&["gradcheck", "--tolerance", "1e-30"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}
