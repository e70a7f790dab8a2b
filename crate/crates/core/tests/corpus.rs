use std::path::{Path, PathBuf};

use evoconfig_core::agent::{read_log, SessionConfig, SessionStatus, Variant};
use evoconfig_core::dockerfile::{consolidate_unchecked, render, DockerfileConfig};
use evoconfig_core::eval::{report_json, run_corpus, transcript_file, CorpusConfig, ProviderMode};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.path().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            std::fs::copy(e.path(), target).unwrap();
        }
    }
}

fn config(variant: Variant, mode: ProviderMode) -> CorpusConfig {
    CorpusConfig::new(SessionConfig { variant, ..SessionConfig::default() }, mode)
}

/// Re-recording with the built-in planner reproduces the checked-in
/// transcripts, so they cannot silently drift from the code.
#[test]
fn transcripts_are_fresh() {
    let cases = [
        ("corpus", Variant::Full),
        ("rollback", Variant::Full),
        ("ablation", Variant::Full),
        ("ablation", Variant::NoPrior),
        ("ablation", Variant::AblateDiagnosis),
    ];
    for (corpus, variant) in cases {
        let tmp = tempfile::tempdir().unwrap();
        copy_dir(&fixtures().join(corpus), tmp.path());
        let report = run_corpus(tmp.path(), &config(variant, ProviderMode::Record)).unwrap();
        assert_eq!(report.errors, 0, "{corpus}");
        for s in &report.scenarios {
            let name = transcript_file(variant);
            let fresh = std::fs::read_to_string(tmp.path().join(&s.name).join(&name)).unwrap();
            let kept = std::fs::read_to_string(fixtures().join(corpus).join(&s.name).join(&name)).unwrap();
            assert!(fresh == kept, "{corpus}/{}/{name} is stale; re-record it", s.name);
        }
    }
}

#[test]
fn worker_count_does_not_change_the_report() {
    let dir = fixtures().join("corpus");
    let mut one = config(Variant::Full, ProviderMode::Replay);
    one.workers = 1;
    let mut many = config(Variant::Full, ProviderMode::Replay);
    many.workers = 4;
    let a = report_json(&run_corpus(&dir, &one).unwrap());
    let b = report_json(&run_corpus(&dir, &many).unwrap());
    assert_eq!(a, b);
}

#[test]
fn rolled_back_rounds_stay_out_of_the_dockerfile() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config(Variant::Full, ProviderMode::Replay);
    cfg.out_dir = Some(out.path().to_path_buf());
    let report = run_corpus(&fixtures().join("rollback"), &cfg).unwrap();
    let s = &report.scenarios[0];
    assert_eq!(s.status, Some(SessionStatus::Solved));

    let log = std::fs::read_to_string(out.path().join(&s.name).join("trajectory.jsonl")).unwrap();
    let logged = read_log(&log).unwrap();
    assert_eq!(logged.status, Some(SessionStatus::Solved));
    let rolled: Vec<u32> = logged.trajectory.iter().filter(|e| e.rolled_back).map(|e| e.round).collect();
    assert!(!rolled.is_empty(), "fixture should exercise a rollback");

    let artifact = consolidate_unchecked(&logged.trajectory, &DockerfileConfig::default());
    let written = std::fs::read_to_string(out.path().join(&s.name).join("Dockerfile")).unwrap();
    assert_eq!(render(&artifact), written);
    for e in logged.trajectory.iter().filter(|e| e.rolled_back) {
        for r in e.ordered_records() {
            let step = r.command.text();
            let kept_elsewhere = logged
                .trajectory
                .iter()
                .filter(|x| !x.rolled_back)
                .any(|x| x.ordered_records().iter().any(|k| k.command.text() == step));
            assert!(kept_elsewhere || !artifact.run_steps.iter().any(|s| s == step), "{step} leaked from a rolled-back round");
        }
    }
}

#[test]
fn empty_corpus_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_corpus(tmp.path(), &config(Variant::Full, ProviderMode::Replay)).is_err());
}
