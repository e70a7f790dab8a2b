use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn evoconfig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evoconfig"))
        .args(args)
        .env_remove("EVOCONFIG_PROVIDER")
        .env_remove("EVOCONFIG_OUT")
        .output()
        .expect("binary runs")
}

fn evoconfig_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evoconfig"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn scenario(name: &str) -> (String, String) {
    let dir = fixtures().join("corpus").join(name);
    (dir.join("scenario.json").display().to_string(), dir.join("transcript.json").display().to_string())
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn configure_solved_scenario_writes_dockerfile() {
    let out = tempfile::tempdir().unwrap();
    let (sc, tr) = scenario("conflict-numpy");
    let o = evoconfig(&["configure", &sc, "--transcript", &tr, "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dockerfile = std::fs::read_to_string(out.path().join("Dockerfile")).unwrap();
    assert!(dockerfile.starts_with("FROM "));
    assert!(dockerfile.contains("RUN pip install -r requirements.txt"));
    for f in ["trajectory.jsonl", "outcome.json", "usage.json", "provenance.json", "build.log"] {
        assert!(out.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn missing_transcript_is_a_config_error() {
    let out = tempfile::tempdir().unwrap();
    let (sc, _) = scenario("conflict-numpy");
    let missing = out.path().join("none.json");
    let o = evoconfig(&["configure", &sc, "--transcript", missing.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn exhausted_budget_exits_one_without_dockerfile() {
    let out = tempfile::tempdir().unwrap();
    let (sc, tr) = scenario("hw-gpu-oom");
    let o = evoconfig(&["configure", &sc, "--transcript", &tr, "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let outcome: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("outcome.json")).unwrap()).unwrap();
    assert_eq!(outcome["status"], "budget_exhausted");
    assert!(!out.path().join("Dockerfile").exists());

    let log = out.path().join("trajectory.jsonl");
    let o = evoconfig(&["synth", log.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ablation_flag_is_recorded_in_the_log_header() {
    let out = tempfile::tempdir().unwrap();
    let dir = fixtures().join("ablation/setup-numpy-statkit");
    let tr = dir.join("transcript.ablate-diagnosis.json");
    let o = evoconfig(&[
        "configure",
        dir.to_str().unwrap(),
        "--ablate-diagnosis",
        "--transcript",
        tr.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    let log = std::fs::read_to_string(out.path().join("trajectory.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["variant"], "ablate_diagnosis");
}

#[test]
fn replay_never_touches_the_configured_endpoint() {
    let out = tempfile::tempdir().unwrap();
    let (sc, tr) = scenario("missing-yaml");
    let o = evoconfig_env(
        &["configure", &sc, "--transcript", &tr, "--out", out.path().to_str().unwrap()],
        &[("EVOCONFIG_PROVIDER", "live"), ("EVOCONFIG_BASE_URL", "http://127.0.0.1:9/v1")],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_reports_and_rejects_empty_corpora() {
    let out = tempfile::tempdir().unwrap();
    let corpus = fixtures().join("corpus");
    let o = evoconfig(&["eval", corpus.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["solved"], 16);
    assert!(String::from_utf8_lossy(&o.stdout).contains("EBSR 80.0%"));

    let empty = tempfile::tempdir().unwrap();
    let o = evoconfig(&["eval", empty.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_rebuilds_the_dockerfile_from_a_log() {
    let out = tempfile::tempdir().unwrap();
    let (sc, tr) = scenario("toolchain-gcc");
    let o = evoconfig(&["configure", &sc, "--transcript", &tr, "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let second = out.path().join("synth");
    let log = out.path().join("trajectory.jsonl");
    let o = evoconfig(&["synth", log.to_str().unwrap(), "--out", second.to_str().unwrap(), "--verify", &sc]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(out.path().join("Dockerfile")).unwrap(),
        std::fs::read_to_string(second.join("Dockerfile")).unwrap()
    );
}

#[test]
fn bad_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[session]\nrounds = 3\n").unwrap();
    let (sc, tr) = scenario("clean-setuptools");
    let o = evoconfig(&["--config", cfg.to_str().unwrap(), "configure", &sc, "--transcript", &tr]);
    assert_eq!(code(&o), 2);
}
