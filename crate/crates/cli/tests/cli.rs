use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_platevi"))
}

fn model(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/models")
        .join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn train_args(out: &std::path::Path) -> Vec<String> {
    [
        "train",
        "--model",
        model("gre.model").to_str().unwrap(),
        "--flow",
        "affine",
        "--hidden",
        "8",
        "--steps",
        "60",
        "--eval-every",
        "20",
        "--eval-samples",
        "8",
        "--final-eval-samples",
        "32",
        "--out",
        out.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn train_writes_trace_summary_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args(train_args(dir.path())));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,wall_seconds,elbo_mc,elbo_full,grad_norm");
    assert_eq!(lines.len(), 61);
    assert!(lines[20].split(',').nth(3).is_some_and(|f| !f.is_empty()));
    assert!(lines[19].split(',').nth(3).is_some_and(|f| f.is_empty()));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["scheme"], "pavi-f");
    assert_eq!(summary["steps"], 60);
    assert!(
        summary["oracle_log_evidence"].as_f64().unwrap() >= summary["final_elbo"].as_f64().unwrap()
    );
    assert!(fs::read(dir.path().join("weights.ckpt"))
        .unwrap()
        .starts_with(b"PVCK"));
}

#[test]
fn identical_seeds_reproduce_traces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let mut args = train_args(d.path());
        args.extend(
            [
                "--scheme",
                "pavi-e",
                "--seed",
                "7",
                "--encoder-hidden",
                "8",
                "--scaling",
                "diagonal",
            ]
            .map(String::from),
        );
        assert!(run(bin().args(args)).status.success());
    }
    assert_eq!(
        fs::read(a.path().join("trace.csv")).unwrap(),
        fs::read(b.path().join("trace.csv")).unwrap()
    );
}

#[test]
fn resume_continues_from_a_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run(bin().args(train_args(a.path()))).status.success());
    let mut args = train_args(b.path());
    args.extend([
        "--resume".to_string(),
        a.path().join("weights.ckpt").to_str().unwrap().to_string(),
    ]);
    assert!(run(bin().args(args)).status.success());
    let first: Vec<String> = fs::read_to_string(a.path().join("trace.csv"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let second = fs::read_to_string(b.path().join("trace.csv")).unwrap();
    assert_ne!(first[1], second.lines().nth(1).unwrap());
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let base = train_args(dir.path());
    let cases: Vec<Vec<&str>> = vec![
        vec!["--card-reduced", "P1=50"],
        vec!["--card", "P1"],
        vec!["--card", "P9=3"],
        vec!["--sample-amortized"],
        vec!["--scheme", "fastest"],
        vec!["--mc-samples", "0"],
    ];
    for extra in cases {
        let mut args = base.clone();
        args.extend(extra.iter().map(|s| s.to_string()));
        let out = run(bin().args(&args));
        assert_eq!(
            out.status.code(),
            Some(2),
            "{extra:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn model_errors_carry_locations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.model");
    fs::write(&path, "plate P1 card=3\nlatent mu ~ Normal(0, \n").unwrap();
    let out = run(bin().args(["check", "--model", path.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.model:2:"), "{err}");

    fs::write(&path, "latent a ~ Normal(b, 1)\nlatent b ~ Normal(a, 1)\n").unwrap();
    let out = run(bin().args(["check", "--model", path.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_prints_a_reparseable_normal_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args(["check", "--model", model("gre.model").to_str().unwrap()]));
    assert!(out.status.success());
    let path = dir.path().join("normal.model");
    fs::write(&path, &out.stdout).unwrap();
    let again = run(bin().args(["check", "--model", path.to_str().unwrap()]));
    assert_eq!(again.stdout, out.stdout);
}

#[test]
fn non_finite_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("blowup.model");
    // the observation scale underflows to zero, making every step non-finite
    fs::write(
        &m,
        "latent mu ~ Normal(0, 1)\nobserved x ~ Normal(mu, exp(-800))\n",
    )
    .unwrap();
    let out = run(bin().args([
        "train",
        "--model",
        m.to_str().unwrap(),
        "--flow",
        "affine",
        "--steps",
        "50",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]));
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unbiasedness_check_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args([
        "experiment",
        "unbiasedness-check",
        "--out",
        dir.path().to_str().unwrap(),
    ]));
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("unbiasedness-check/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["unbiasedness"]["batches"], 6);
    assert_eq!(summary["unbiasedness"]["pass"], true);
}

#[test]
fn small_experiment_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args([
            "experiment",
            "scaling-lite",
            "--steps",
            "20",
            "--data-samples",
            "1",
            "--repetitions",
            "2",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .env("PLATEVI_THREADS", "2"));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("scaling-lite/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 18);
    for r in summary["runs"].as_array().unwrap() {
        assert!(r["summary"]["oracle_log_evidence"].is_f64());
        assert!(dir
            .path()
            .join("scaling-lite")
            .join(r["csv"].as_str().unwrap())
            .exists());
    }
    let unknown = run(bin().args(["experiment", "nope", "--out", dir.path().to_str().unwrap()]));
    assert_eq!(unknown.status.code(), Some(2));
}
