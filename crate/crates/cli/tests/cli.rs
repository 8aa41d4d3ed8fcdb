use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn backtrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_backtrans"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_kind(o: &Output) -> String {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error\t")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    lines[0].split('\t').nth(1).unwrap().to_string()
}

#[test]
fn stage_commands_then_report_and_translate() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = fixtures().join("with-bible.ini");
    let (c, r) = (config.to_str().unwrap(), run.to_str().unwrap());
    for cmd in ["clean", "split", "learn-bpe", "train"] {
        let o = backtrans(&["--config", c, "--run-dir", r, cmd]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    assert!(run.join("models/baseline.en-lg.model").exists());
    let clean_report = fs::read_to_string(run.join("splits/clean/general.report.tsv")).unwrap();
    assert!(clean_report.lines().count() > 1);

    let o = backtrans(&["--config", c, "--run-dir", r, "report", "--format", "tsv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("direction\tmodel\tbleu\tgain"));
    assert_eq!(out, fs::read_to_string(run.join("report.tsv")).unwrap());

    let input = dir.path().join("in.txt");
    let first = fs::read_to_string(fixtures().join("data/newtest.en-lg.tsv")).unwrap();
    let src = first.lines().next().unwrap().split('\t').next().unwrap().to_string();
    fs::write(&input, format!("{src}\n")).unwrap();
    let model = run.join("models/baseline.en-lg.model");
    let o = backtrans(&[
        "--run-dir",
        r,
        "translate",
        "--model",
        model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1);
}

#[test]
fn evaluate_scores_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("h.txt");
    fs::write(&f, "a b c d\ne f g h\n").unwrap();
    let p = f.to_str().unwrap();
    let o = backtrans(&["evaluate", "--hypotheses", p, "--references", p]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("bleu\t100.00") && out.contains("ter\t0.00"), "{out}");
}

#[test]
fn failures_are_one_machine_readable_line() {
    let o = backtrans(&["--config", "/nonexistent.ini", "--run-dir", "/tmp/x", "clean"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "missing-path");

    let o = backtrans(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "usage");

    let o = backtrans(&["clean"]);
    assert_eq!(error_kind(&o), "config");

    let model = fixtures().join("old-format.model");
    let o = backtrans(&["translate", "--model", model.to_str().unwrap(), "--bpe", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "translator");
    assert!(stderr(&o).contains("format version 0"), "{}", stderr(&o));
}

#[test]
fn compare_refuses_mismatched_test_sets() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let config = fixtures().join("with-bible.ini");
    let c = config.to_str().unwrap();
    for (run, seed) in [(&a, "11"), (&b, "12")] {
        let o = backtrans(&[
            "--config",
            c,
            "--run-dir",
            run.to_str().unwrap(),
            "--seed",
            seed,
            "evaluate",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = backtrans(&[
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--direction",
        "en-lg",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "fingerprint-mismatch");
    let o = backtrans(&[
        "compare",
        a.to_str().unwrap(),
        a.to_str().unwrap(),
        "--direction",
        "en-lg",
        "--format",
        "tsv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 3);
}
