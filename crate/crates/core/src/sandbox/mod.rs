//! Execution substrate: one interface, a deterministic simulator and a thin
//! container adapter.

mod container;
mod process;
pub mod scenario;
mod shell;
mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::AtomicCommand;
use crate::prior::RepoTree;

/// Compiles a regex once per process. Scenario patterns repeat across
/// sandboxes and commands, and compiling dominates simulator cost otherwise.
pub(crate) fn cached_regex(pattern: &str) -> Result<regex::Regex, regex::Error> {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<String, regex::Regex>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(pattern) {
        return Ok(r.clone());
    }
    let r = regex::Regex::new(pattern)?;
    cache.lock().unwrap_or_else(|e| e.into_inner()).insert(pattern.to_string(), r.clone());
    Ok(r)
}

pub use container::{ContainerSandbox, DockerCli};
pub use process::{run_with_timeout, ProcessOutput};
pub use scenario::{Behavior, Clause, Outcome, PackageSpec, ProjectSpec, SimScenario};
pub use sim::SimSandbox;
pub(crate) use sim::cmp_versions;

/// Per-stream capture cap in bytes.
pub const CAPTURE_CAP: usize = 32 * 1024;
/// Exit code reported for timed-out commands.
pub const TIMEOUT_EXIT: i32 = 124;
/// Grace period the watchdog allows past a command's timeout.
pub const WATCHDOG_GRACE_SECS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Container,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentState {
    pub handle: String,
    pub round: u32,
    pub backend: BackendKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SnapshotId {
    pub id: String,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub command: AtomicCommand,
    pub exit_code: i32,
    pub stdout: String,
    pub stdout_truncated: bool,
    pub stderr: String,
    pub stderr_truncated: bool,
    pub duration: f64,
    pub timed_out: bool,
}

impl ExecutionRecord {
    /// Builds a record, clipping each stream to [`CAPTURE_CAP`].
    pub fn new(
        command: AtomicCommand,
        exit_code: i32,
        stdout: &str,
        stderr: &str,
        duration: f64,
        timed_out: bool,
    ) -> Self {
        let (stdout, stdout_truncated) = clip_tail(stdout, CAPTURE_CAP);
        let (stderr, stderr_truncated) = clip_tail(stderr, CAPTURE_CAP);
        let exit_code = if timed_out { TIMEOUT_EXIT } else { exit_code };
        ExecutionRecord { command, exit_code, stdout, stdout_truncated, stderr, stderr_truncated, duration, timed_out }
    }

    pub fn succeeded(&self) -> bool {
        self.exit_code == 0 && !self.timed_out
    }

    /// stdout followed by stderr.
    pub fn combined_output(&self) -> String {
        let mut s = self.stdout.clone();
        if !s.is_empty() && !self.stderr.is_empty() && !s.ends_with('\n') {
            s.push('\n');
        }
        s.push_str(&self.stderr);
        s
    }
}

/// Keeps the last `cap` bytes, cut on a char boundary. Errors tend to be at the end.
pub fn clip_tail(text: &str, cap: usize) -> (String, bool) {
    if text.len() <= cap {
        return (text.to_string(), false);
    }
    let mut start = text.len() - cap;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    (text[start..].to_string(), true)
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("session is closed")]
    SessionClosed,
    #[error("snapshot {0} is no longer valid")]
    SnapshotExpired(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("backend failure: {0}")]
    Backend(String),
}

/// The transition function over environment states, plus rollback.
pub trait Sandbox: Send {
    fn state(&self) -> EnvironmentState;
    fn set_round(&mut self, round: u32);
    fn execute(&mut self, cmd: &AtomicCommand) -> Result<ExecutionRecord, SandboxError>;
    fn snapshot(&mut self) -> Result<SnapshotId, SandboxError>;
    fn restore(&mut self, id: &SnapshotId) -> Result<EnvironmentState, SandboxError>;
    fn check_solved(&mut self) -> Result<bool, SandboxError>;
    /// Read-only view of the repository, for prior extraction.
    fn repo_tree(&self) -> Option<RepoTree>;
    fn close(&mut self);
}

/// Runs an action set in order; the identity transition for an empty set.
pub fn execute_all(
    sandbox: &mut dyn Sandbox,
    commands: &[AtomicCommand],
) -> Result<Vec<ExecutionRecord>, SandboxError> {
    commands.iter().map(|c| sandbox.execute(c)).collect()
}
