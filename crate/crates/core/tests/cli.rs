use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use curator::report::{
    load_summary, parse_config_str, run_experiment, run_suite, CHECKPOINT_FILE, FAILED_MARKER, FRONTIER_FILE,
    HISTOGRAM_FILE, SCORES_FILE, SUMMARY_FILE, TRACE_FILE,
};
use curator::tinymodel::load_checkpoint;

fn curator(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curator"))
        .args(args)
        .env("CURATOR_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn config(policy: &str, output: &str) -> String {
    format!(
        r#"{{
  "corpus": {{"synth": {{"n_per_domain": 12, "seq_len": 16, "seed": 2}}}},
  "anchors": {{"per_domain": 1, "domains": ["A"]}},
  "model": {{"n_layers": 1, "d_model": 8, "n_heads": 2, "max_seq_len": 16}},
  "train": {{"lr": 0.1, "batch_size": 4, "steps": 6, "seed": 3, "eval_interval": 3}},
  "policy": {policy},
  "eval": {{"domains": ["A"], "histogram_bins": 8}},
  "output": "{output}"
}}"#
    )
}

const ONLINE: &str = r#"{"kind": "online", "scorer": "adapt_embed", "refresh": 2}"#;

fn write_config(dir: &Path, name: &str, policy: &str, output: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, config(policy, output)).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_every_artifact_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", ONLINE, "run");
    let o = curator(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("run");
    for f in [TRACE_FILE, SUMMARY_FILE, HISTOGRAM_FILE, SCORES_FILE, CHECKPOINT_FILE] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(out.join("checkpoints/step_000003.ckpt").is_file());
    assert!(out.join("checkpoints/step_000006.ckpt").is_file());
    assert!(!out.join(FAILED_MARKER).exists());

    let trace = fs::read_to_string(out.join(TRACE_FILE)).unwrap();
    assert!(trace.starts_with("# "));
    assert!(trace.lines().any(|l| l.starts_with("# gate: ")));
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6);
    let summary = load_summary(out.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.steps, 6);
    assert_eq!(summary.refresh_steps, vec![1, 3, 5]);
    assert_eq!(summary.gate.unwrap().temperature, 1.0);
    let ckpt = load_checkpoint(out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.step, 6);

    // refuses to overwrite, then reproduces byte for byte under --force
    let o = curator(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("refusing to overwrite"));
    let before: Vec<Vec<u8>> = [TRACE_FILE, SUMMARY_FILE, HISTOGRAM_FILE, SCORES_FILE]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    let o = curator(&["train", "--config", &cfg, "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (f, b) in [TRACE_FILE, SUMMARY_FILE, HISTOGRAM_FILE, SCORES_FILE].iter().zip(&before) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), b, "{f} differs");
    }

    // a different seed changes the trajectory
    let o = curator(&["train", "--config", &cfg, "--force", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(fs::read(out.join(TRACE_FILE)).unwrap(), before[0]);
}

#[test]
fn config_errors_exit_with_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = config(r#"{"kind": "online", "scorer": "adapt_embed", "gate": {"taw": 0.5}}"#, "run");
    fs::write(&path, text).unwrap();
    let o = curator(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("taw"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());

    let o = curator(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_curator"))
        .args(["train", "--config", path.to_str().unwrap()])
        .env("CURATOR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_and_path_corpus_agree() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.json");
    fs::write(&spec, r#"{"n_per_domain": 12, "seq_len": 16, "seed": 2}"#).unwrap();
    let o = curator(&["synth", "--config", spec.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("corpus.jsonl").is_file());

    let synth = write_config(dir.path(), "a.json", ONLINE, "a");
    let text = config(ONLINE, "b").replace(
        r#"{"synth": {"n_per_domain": 12, "seq_len": 16, "seed": 2}}"#,
        r#"{"path": "corpus.jsonl"}"#,
    );
    fs::write(dir.path().join("b.json"), text).unwrap();
    for cfg in [synth.as_str(), dir.path().join("b.json").to_str().unwrap()] {
        let o = curator(&["train", "--config", cfg]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(
        fs::read(dir.path().join("a").join(TRACE_FILE)).unwrap(),
        fs::read(dir.path().join("b").join(TRACE_FILE)).unwrap()
    );
}

#[test]
fn score_subcommand_dumps_offline_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        r#"{"kind": "selection", "scorer": "bm25", "threshold": 0.0}"#,
        "scores",
    );
    let o = curator(&["score", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("scores").join(SCORES_FILE)).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 24);
    assert!(text.contains("preprocessing flops 0"));

    let cfg = write_config(dir.path(), "u.json", r#"{"kind": "uniform"}"#, "u");
    let o = curator(&["score", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flops_subcommand_prints_method_totals() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flops.json");
    fs::write(
        &path,
        r#"{"constants": {"n_params": 7000000000, "n_prime": 7000000000, "tokens_per_sample": 2048,
            "pool": 100000, "selected": 10000, "epochs": 2}, "methods": ["random"]}"#,
    )
    .unwrap();
    let o = curator(&["flops", "--config", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows[0]["method"], "random");
    assert_eq!(rows[0]["total"].as_u64(), Some(1_720_320_000_000_000_000));
    assert_eq!(rows[0]["prep"].as_u64(), Some(0));
}

#[test]
fn suite_and_report_mark_the_frontier() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = [
        write_config(dir.path(), "online.json", ONLINE, "online"),
        write_config(dir.path(), "uniform.json", r#"{"kind": "uniform"}"#, "uniform"),
        write_config(dir.path(), "lin.json", r#"{"kind": "linupper", "alpha": 2.0}"#, "lin"),
        write_config(
            dir.path(),
            "mix.json",
            r#"{"kind": "mixing", "weights": {"A": 3, "B": 1}, "mode": "quota"}"#,
            "mix",
        ),
        write_config(
            dir.path(),
            "sel.json",
            r#"{"kind": "selection", "scorer": "ppl", "threshold": -100.0}"#,
            "sel",
        ),
    ];
    let out = dir.path().join("suite");
    let mut args = vec!["suite", "--parallel", "--out", out.to_str().unwrap()];
    for c in &cfgs {
        args.extend(["--config", c.as_str()]);
    }
    let o = curator(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let frontier = fs::read_to_string(out.join(FRONTIER_FILE)).unwrap();
    let rows: Vec<&str> = frontier.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + cfgs.len());
    assert!(rows[1..].iter().any(|r| r.ends_with(",1")));

    let mix = load_summary(dir.path().join("mix").join(SUMMARY_FILE)).unwrap();
    assert_eq!(mix.domain_mixture["A"], 0.75);
    assert!(mix.histograms.is_empty());
    let sel = load_summary(dir.path().join("sel").join(SUMMARY_FILE)).unwrap();
    assert_eq!(sel.retained, Some(24));
    assert!(sel.ledger.prep > 0);

    let report = dir.path().join("report");
    let mut args = vec!["report", "--out", report.to_str().unwrap()];
    for c in &cfgs {
        args.extend(["--config", c.as_str()]);
    }
    let o = curator(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(report.join(FRONTIER_FILE)).unwrap(),
        fs::read_to_string(out.join(FRONTIER_FILE)).unwrap()
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("policy"));
}

#[test]
fn failed_runs_leave_a_marker_and_fail_the_suite() {
    let dir = tempfile::tempdir().unwrap();
    let good = parse_config_str(&config(r#"{"kind": "uniform"}"#, "good"), dir.path()).unwrap();
    // a threshold above every score leaves nothing to train on
    let bad = parse_config_str(
        &config(r#"{"kind": "selection", "scorer": "ppl", "threshold": 1e9}"#, "bad"),
        dir.path(),
    )
    .unwrap();
    let err = run_suite(&[good.clone(), bad.clone()], dir.path(), false, false).unwrap_err();
    assert!(err.to_string().contains("1 of 2"), "{err}");
    assert!(dir.path().join("bad").join(FAILED_MARKER).is_file());
    assert!(dir.path().join("good").join(SUMMARY_FILE).is_file());
    assert!(!dir.path().join(FRONTIER_FILE).exists());

    assert!(run_suite(&[], dir.path(), false, false).is_err());
    assert!(run_experiment(&good, false).is_err());
    run_experiment(&good, true).unwrap();
}
