//! Consolidates the surviving successful commands of a session into a
//! Dockerfile, one `RUN` per step, and replays it to check that it builds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{SessionOutcome, SessionStatus, TrajectoryEntry};
use crate::command::{classify_command, AtomicCommand, CommandClass, Origin};
use crate::sandbox::{Sandbox, SandboxError};

/// Default base image. A tag, not a digest: see the README for pinning.
pub const DEFAULT_BASE_IMAGE: &str = "python:3.11.9-slim-bookworm";
pub const DEFAULT_WORKDIR: &str = "/repo";
pub const DEFAULT_TEST_ENTRY: &str = "python -m pytest";

#[derive(Debug, Error, PartialEq)]
pub enum DockerfileError {
    #[error("session is not solved (status {0})")]
    NotSolved(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DockerfileConfig {
    pub base_image: String,
    pub workdir: String,
    pub test_entry: String,
}

impl Default for DockerfileConfig {
    fn default() -> Self {
        DockerfileConfig {
            base_image: DEFAULT_BASE_IMAGE.into(),
            workdir: DEFAULT_WORKDIR.into(),
            test_entry: DEFAULT_TEST_ENTRY.into(),
        }
    }
}

/// Where a step came from in the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub step: usize,
    pub round: u32,
    /// Position among the round's executed records, repairs included.
    pub index: usize,
    pub origin: Origin,
    pub timeout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DockerfileArtifact {
    pub base_image: String,
    pub workdir: String,
    pub run_steps: Vec<String>,
    pub test_entry: String,
    pub provenance: Vec<Provenance>,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildResult {
    pub built: bool,
    pub solved: bool,
    pub failed_step: Option<usize>,
    pub log: String,
}

/// Test launches prove the environment; they do not change it.
pub fn is_test_launch(text: &str) -> bool {
    let mut words = text.split_whitespace();
    match words.next() {
        Some("pytest") => true,
        Some("python" | "python3") => words.next() == Some("-m") && words.next() == Some("pytest"),
        _ => false,
    }
}

/// Whether an executed command becomes a `RUN` step.
fn keep(cmd: &AtomicCommand, exit_code: i32) -> bool {
    exit_code == 0
        && matches!(cmd.origin(), Origin::MainAgent | Origin::ExpertRepair)
        && classify_command(cmd) != CommandClass::ReadOnly
        && !is_test_launch(cmd.text())
}

/// Consolidates a solved session.
pub fn consolidate(outcome: &SessionOutcome, config: &DockerfileConfig) -> Result<DockerfileArtifact, DockerfileError> {
    if outcome.status != SessionStatus::Solved {
        return Err(DockerfileError::NotSolved(outcome.status.as_str()));
    }
    Ok(consolidate_unchecked(&outcome.trajectory, config))
}

/// Consolidates any trajectory, solved or not.
pub fn consolidate_unchecked(trajectory: &[TrajectoryEntry], config: &DockerfileConfig) -> DockerfileArtifact {
    let mut run_steps = Vec::new();
    let mut provenance = Vec::new();
    for entry in trajectory.iter().filter(|e| !e.rolled_back) {
        for (index, rec) in entry.ordered_records().into_iter().enumerate() {
            if keep(&rec.command, rec.exit_code) {
                provenance.push(Provenance {
                    step: run_steps.len(),
                    round: entry.round,
                    index,
                    origin: rec.command.origin(),
                    timeout: rec.command.timeout(),
                });
                run_steps.push(rec.command.text().to_string());
            }
        }
    }
    let mut artifact = DockerfileArtifact {
        base_image: config.base_image.clone(),
        workdir: config.workdir.clone(),
        run_steps,
        test_entry: config.test_entry.clone(),
        provenance,
        rendered: String::new(),
    };
    artifact.rendered = render(&artifact);
    artifact
}

pub fn render(a: &DockerfileArtifact) -> String {
    let mut s = format!("FROM {}\nENV DEBIAN_FRONTEND=noninteractive\nWORKDIR {}\nCOPY . {}\n", a.base_image, a.workdir, a.workdir);
    for step in &a.run_steps {
        s.push_str("RUN ");
        s.push_str(step);
        s.push('\n');
    }
    let argv: Vec<String> = a.test_entry.split_whitespace().map(str::to_string).collect();
    s.push_str(&format!("CMD {}\n", serde_json::to_string(&argv).expect("strings serialize")));
    s
}

/// The provenance sidecar, one JSON document.
pub fn provenance_json(a: &DockerfileArtifact) -> String {
    let mut s = serde_json::to_string_pretty(&a.provenance).expect("provenance serializes");
    s.push('\n');
    s
}

/// Replays the steps on a fresh environment: built iff every step exits 0.
pub fn verify_build(a: &DockerfileArtifact, fresh: &mut dyn Sandbox) -> Result<BuildResult, SandboxError> {
    let mut log = String::new();
    for (i, step) in a.run_steps.iter().enumerate() {
        let timeout = a.provenance.get(i).map_or(crate::command::DEFAULT_TIMEOUT_SECS, |p| p.timeout);
        let cmd = AtomicCommand::with_timeout(step, Origin::DockerfileReplay, timeout)
            .map_err(|e| SandboxError::Backend(format!("step {i}: {e}")))?;
        let rec = fresh.execute(&cmd)?;
        log.push_str(&format!("step {i}: RUN {step} -> exit {}\n", rec.exit_code));
        if !rec.succeeded() {
            log.push_str(&format!("build failed at step {i}\n"));
            return Ok(BuildResult { built: false, solved: false, failed_step: Some(i), log });
        }
    }
    let solved = fresh.check_solved()?;
    log.push_str(&format!("build succeeded; tests launch: {solved}\n"));
    Ok(BuildResult { built: true, solved, failed_step: None, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_launch_detection() {
        assert!(is_test_launch("python -m pytest -q"));
        assert!(is_test_launch("pytest"));
        assert!(!is_test_launch("pip install pytest"));
        assert!(!is_test_launch("python -m pip install x"));
    }

    #[test]
    fn rendering_is_stable() {
        let mut a = DockerfileArtifact {
            base_image: DEFAULT_BASE_IMAGE.into(),
            workdir: "/repo".into(),
            run_steps: vec!["pip install -e .".into()],
            test_entry: "python -m pytest".into(),
            provenance: Vec::new(),
            rendered: String::new(),
        };
        a.rendered = render(&a);
        assert_eq!(
            a.rendered,
            "FROM python:3.11.9-slim-bookworm\nENV DEBIAN_FRONTEND=noninteractive\nWORKDIR /repo\nCOPY . /repo\nRUN pip install -e .\nCMD [\"python\",\"-m\",\"pytest\"]\n"
        );
    }
}
