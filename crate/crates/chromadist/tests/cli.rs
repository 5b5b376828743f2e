//! End-to-end tests of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn chromadist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chromadist"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        stderr(out)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stderr: {}\nstdout: {}",
        stderr(out),
        stdout(out)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic corpus written once per test via `synth`.
fn synth_corpus(dir: &Path) {
    let out = chromadist(&[
        "synth",
        "--output-dir",
        path_str(dir),
        "--seed",
        "1",
        "--n-base",
        "3",
        "--n-modifiers",
        "1",
        "--samples-per-name",
        "40",
    ]);
    assert_success(&out);
}

#[test]
fn prepare_splits_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.tsv");
    std::fs::write(
        &raw,
        "# comment line\n\
         red\t0.01\t0.9\t0.5\n\
         red\t0.99\t0.95\t0.6\n\
         red\t0.02\t0.5\t0.9\n\
         red\t0.0\t0.92\t0.55\n",
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = chromadist(&[
            "prepare",
            "--input",
            path_str(&raw),
            "--output-dir",
            path_str(out_dir),
            "--train-frac",
            "0.5",
            "--dev-frac",
            "0.25",
            "--seed",
            "7",
        ]);
        assert_success(&out);
        assert!(stdout(&out).contains("4 observations"));
    }
    for name in ["train.tsv", "dev.tsv", "test.tsv", "vocab.txt"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn prepare_reports_bad_rows_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.tsv");
    std::fs::write(&raw, "red\t0.9\t0.9\t0.5\nblue\t1.5\t0.5\t0.5\n").unwrap();
    let out = chromadist(&[
        "prepare",
        "--input",
        path_str(&raw),
        "--output-dir",
        path_str(&dir.path().join("out")),
    ]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("line 2"), "stderr: {}", stderr(&out));
}

#[test]
fn split_extrapolation_removes_selected_descriptions() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path());
    let full = dir.path().join("full");
    let extrap = dir.path().join("custom-extrap");
    let out = chromadist(&[
        "split-extrapolation",
        "--input-dir",
        path_str(&full),
        "--output-dir",
        path_str(&extrap),
        "--count",
        "1",
        "--min-other-uses",
        "2",
    ]);
    assert_success(&out);
    let selected_raw = std::fs::read_to_string(extrap.join("selected.txt")).unwrap();
    let selected: Vec<&str> = selected_raw
        .lines()
        .filter(|l| !l.starts_with('#'))
        .collect();
    assert_eq!(selected.len(), 1);
    assert!(selected_raw.starts_with("# chromadist split-extrapolation"));
    let train = std::fs::read_to_string(extrap.join("train.tsv")).unwrap();
    for line in train.lines().filter(|l| !l.starts_with('#')) {
        let desc = line.split('\t').next().unwrap();
        assert_ne!(desc, selected[0], "held-out description found in train");
    }
}

#[test]
fn split_extrapolation_reports_infeasible_counts() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path());
    let out = chromadist(&[
        "split-extrapolation",
        "--input-dir",
        path_str(&dir.path().join("full")),
        "--output-dir",
        path_str(&dir.path().join("x")),
        "--count",
        "50",
    ]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("infeasible"), "stderr: {}", stderr(&out));
}

#[test]
fn baseline_train_query_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path());
    let full = dir.path().join("full");
    let ckpt = dir.path().join("baseline.ckpt");
    let out = chromadist(&[
        "train",
        "--input-dir",
        path_str(&full),
        "--model",
        "baseline",
        "--output",
        path_str(&ckpt),
        "--resolution",
        "16",
    ]);
    assert_success(&out);

    // query a description that exists in the synthetic corpus
    let train_tsv = std::fs::read_to_string(full.join("train.tsv")).unwrap();
    let desc = train_tsv.lines().next().unwrap().split('\t').next().unwrap();
    let export = dir.path().join("plot.csv");
    let out = chromadist(&[
        "query",
        "--checkpoint",
        path_str(&ckpt),
        "--description",
        desc,
        "--point",
        "0.5",
        "0.5",
        "0.5",
        "--export",
        path_str(&export),
    ]);
    assert_success(&out);
    assert!(stdout(&out).contains("P(h=0.5, s=0.5, v=0.5)"));
    let csv = std::fs::read_to_string(&export).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 16, "header plus 3n rows");

    let report = dir.path().join("report.tsv");
    let out = chromadist(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--test",
        path_str(&full.join("test.tsv")),
        "--output",
        path_str(&report),
    ]);
    assert_success(&out);
    let report = std::fs::read_to_string(&report).unwrap();
    assert!(report.starts_with("model\tresolution\tperp\tperpstd\n"));
    assert!(report.lines().nth(1).unwrap().starts_with("baseline\t16\t"));
}

#[test]
fn eval_uniform_scores_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path());
    let out = chromadist(&[
        "eval",
        "--uniform",
        "--resolution",
        "16",
        "--test",
        path_str(&dir.path().join("full").join("test.tsv")),
    ]);
    assert_success(&out);
    let row = stdout(&out).lines().nth(1).unwrap().to_string();
    let std_pp: f64 = row.rsplit('\t').next().unwrap().parse().unwrap();
    assert!((std_pp - 1.0).abs() < 1e-9, "standardized {std_pp}");
}

#[test]
fn baseline_eval_needs_fallback_for_unseen_descriptions() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path());
    let full = dir.path().join("full");
    let ckpt = dir.path().join("baseline.ckpt");
    assert_success(&chromadist(&[
        "train",
        "--input-dir",
        path_str(&full),
        "--model",
        "baseline",
        "--output",
        path_str(&ckpt),
        "--resolution",
        "8",
    ]));
    let unseen = dir.path().join("unseen.tsv");
    std::fs::write(&unseen, "completely novel\t0.5\t0.5\t0.5\n").unwrap();
    let strict = chromadist(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--test",
        path_str(&unseen),
    ]);
    assert_exit(&strict, 2);
    let fallback = chromadist(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--test",
        path_str(&unseen),
        "--fallback-uniform",
    ]);
    assert_success(&fallback);
    let row = stdout(&fallback).lines().nth(1).unwrap().to_string();
    let std_pp: f64 = row.rsplit('\t').next().unwrap().parse().unwrap();
    assert!((std_pp - 1.0).abs() < 1e-9, "unseen rows score uniformly");
}

#[test]
fn cdest_train_logs_and_rejects_unknown_tokens() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path());
    let full = dir.path().join("full");
    let ckpt = dir.path().join("cdest.ckpt");
    let log = dir.path().join("log.tsv");
    let out = chromadist(&[
        "train",
        "--input-dir",
        path_str(&full),
        "--model",
        "cdest",
        "--output",
        path_str(&ckpt),
        "--log",
        path_str(&log),
        "--resolution",
        "8",
        "--embed-dim",
        "4",
        "--hidden-dim",
        "8",
        "--dropout",
        "0.0",
        "--max-epochs",
        "2",
        "--batch-size",
        "64",
    ]);
    assert_success(&out);
    let log = std::fs::read_to_string(&log).unwrap();
    assert!(log.starts_with("epoch\ttrain_loss\tdev_pp\tdev_pp_std\n"));
    assert_eq!(log.lines().count(), 1 + 2, "two epoch rows");

    let out = chromadist(&[
        "query",
        "--checkpoint",
        path_str(&ckpt),
        "--description",
        "galactic nonsense",
    ]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("galactic"), "stderr: {}", stderr(&out));
}

#[test]
fn correlate_reports_three_pairs() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path());
    let out = chromadist(&[
        "correlate",
        "--input",
        path_str(&dir.path().join("full").join("train.tsv")),
        "--min-count",
        "5",
    ]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.starts_with("pair\tq3\n"));
    for pair in ["h-s", "h-v", "s-v"] {
        assert!(text.contains(pair), "missing pair {pair} in: {text}");
    }
}

#[test]
fn thread_env_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_chromadist"))
        .env("CHROMADIST_THREADS", "many")
        .args(["eval", "--uniform", "--test", "nowhere.tsv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CHROMADIST_THREADS"));
}
