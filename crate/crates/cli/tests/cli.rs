use std::path::Path;
use std::process::{Command, Output};

fn sdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdlab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(sdlab(&["--help"]).status.code(), Some(0));
    assert_eq!(sdlab(&["--version"]).status.code(), Some(0));
    assert_eq!(sdlab(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn invalid_flags_exit_two_with_one_line() {
    for args in [
        vec!["frobnicate"],
        vec!["train"],
        vec!["train", "--out", "x", "--seed", "abc"],
        vec!["config", "--preset", "huge"],
        vec!["ablate", "--out", "x", "--families", "colour"],
        vec!["eval", "--checkpoint", "/definitely/missing.json"],
    ] {
        let o = sdlab(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert_eq!(stderr(&o).trim_end().lines().count(), 1, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn config_file_overrides_preset_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, "group_size = 3\n[hindsight]\nleave_one_out = true\n").unwrap();
    let o = sdlab(&["config", "--config", p(&good)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("group_size = 3"));
    assert!(text.contains("leave_one_out = true"));
    assert!(text.contains("learning_rate = 0.003"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "group_sise = 3\n").unwrap();
    assert_eq!(
        sdlab(&["config", "--config", p(&bad), "--check"]).status.code(),
        Some(2)
    );

    let conflict = dir.path().join("conflict.toml");
    std::fs::write(&conflict, "[hindsight]\nno_labels = true\nshuffled_labels = true\n").unwrap();
    assert_eq!(
        sdlab(&["config", "--config", p(&conflict), "--check"]).status.code(),
        Some(2)
    );

    let paper = sdlab(&["config", "--preset", "paper"]);
    assert!(stdout(&paper).contains("batch_questions = 256"));
}

#[test]
fn gen_corpus_writes_requested_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let o = sdlab(&[
        "gen-corpus",
        "--out",
        p(&out),
        "--seed",
        "7",
        "--entities",
        "50",
        "--relations",
        "4",
        "--questions",
        "100",
        "--hops",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("questions 100"));
    let c = sdlab::env::Corpus::load(&out).unwrap();
    assert_eq!(c.questions.len(), 100);
    assert!(c.questions.iter().all(|q| q.gold_path.len() == 2));
}

#[test]
fn train_then_inspect_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = d.join("short.toml");
    std::fs::write(
        &conf,
        "total_steps = 12\nt_warm = 4\neval_every = 4\ncheckpoint_every = 6\n",
    )
    .unwrap();
    let run = d.join("run");
    let o = sdlab(&[
        "train",
        "--config",
        p(&conf),
        "--seed",
        "3",
        "--out",
        p(&run),
        "--jobs",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "manifest.json",
        "corpus.json",
        "metrics.jsonl",
        "metrics.csv",
        "timings.csv",
        "summary.json",
        "checkpoints/step_000006.json",
        "checkpoints/final.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["total_steps"], 12);
    let metrics = sdlab::trainer::read_metrics(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 12);
    for m in &metrics {
        assert!(m.search_quality >= 0.0 && m.search_quality <= 1.0);
        assert!(m.search_frequency >= 0.0 && m.search_frequency <= 3.0 + m.overage);
        assert_eq!(m.alpha_eff == 0.0, m.step < 4);
    }

    let ckpt = run.join("checkpoints/final.json");
    let o = sdlab(&["eval", "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("EM "));
    let json: serde_json::Value = serde_json::from_str(text.split_once('\n').unwrap().1).unwrap();
    assert_eq!(json["n"], 100);
    for k in ["em", "search_quality", "search_frequency"] {
        assert!(json[k].is_number(), "{k}");
    }

    let o = sdlab(&[
        "render-block",
        "--checkpoint",
        p(&ckpt),
        "--question-id",
        "5",
        "--member",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(
        text.contains("[Trajectory Hindsight]:") || text.contains("no block"),
        "{text}"
    );

    let trace = d.join("t.csv");
    let o = sdlab(&[
        "trace",
        "--checkpoint",
        p(&ckpt),
        "--question-id",
        "5",
        "--out",
        p(&trace),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&trace)
        .unwrap()
        .starts_with("position,span,token"));

    let o = sdlab(&["trace", "--checkpoint", p(&ckpt), "--question-id", "999999"]);
    assert_eq!(o.status.code(), Some(2));
}
