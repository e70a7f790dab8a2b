//! Thin adapter over the `docker` CLI. Snapshots are `docker commit` images;
//! restore replaces the working container with one started from the image.

use std::path::{Path, PathBuf};
use std::process::Command;

use super::process::run_with_timeout;
use super::{BackendKind, EnvironmentState, ExecutionRecord, Sandbox, SandboxError, SnapshotId, WATCHDOG_GRACE_SECS};
use crate::command::AtomicCommand;
use crate::prior::RepoTree;

const CONTROL_TIMEOUT: f64 = 120.0;

/// Handle on a working docker binary.
#[derive(Debug, Clone)]
pub struct DockerCli {
    binary: String,
}

impl DockerCli {
    /// Checks that `binary` answers `version`; otherwise the backend is unavailable.
    pub fn detect(binary: &str) -> Result<Self, SandboxError> {
        let mut c = Command::new(binary);
        c.args(["version", "--format", "{{.Server.Version}}"]);
        match run_with_timeout(c, 15.0) {
            Ok(out) if out.exit_code == 0 => Ok(DockerCli { binary: binary.to_string() }),
            Ok(out) => Err(SandboxError::BackendUnavailable(format!("{binary} version: {}", out.stderr.trim()))),
            Err(e) => Err(SandboxError::BackendUnavailable(e.to_string())),
        }
    }

    fn run(&self, args: &[&str], timeout: f64) -> Result<super::process::ProcessOutput, SandboxError> {
        let mut c = Command::new(&self.binary);
        c.args(args);
        run_with_timeout(c, timeout)
    }

    fn run_ok(&self, args: &[&str]) -> Result<String, SandboxError> {
        let out = self.run(args, CONTROL_TIMEOUT)?;
        if out.exit_code != 0 {
            return Err(SandboxError::Backend(format!("docker {}: {}", args.join(" "), out.stderr.trim())));
        }
        Ok(out.stdout.trim().to_string())
    }
}

pub struct ContainerSandbox {
    docker: DockerCli,
    name: String,
    repo: PathBuf,
    test_command: String,
    round: u32,
    snapshots: Vec<String>,
    closed: bool,
}

impl ContainerSandbox {
    /// Starts E0: `base_image` with the repository copied to `/repo`.
    pub fn start(docker: DockerCli, repo: &Path, base_image: &str, test_command: &str) -> Result<Self, SandboxError> {
        if !repo.is_dir() {
            return Err(SandboxError::ScenarioInvalid(format!("{} is not a directory", repo.display())));
        }
        let name = format!("evoconfig-{}", std::process::id());
        docker.run_ok(&["run", "-d", "--name", &name, "-w", "/repo", base_image, "sleep", "infinity"])?;
        let src = format!("{}/.", repo.display());
        docker.run_ok(&["cp", &src, &format!("{name}:/repo")])?;
        Ok(ContainerSandbox {
            docker,
            name,
            repo: repo.to_path_buf(),
            test_command: test_command.to_string(),
            round: 0,
            snapshots: Vec::new(),
            closed: false,
        })
    }
}

impl Sandbox for ContainerSandbox {
    fn state(&self) -> EnvironmentState {
        EnvironmentState { handle: self.name.clone(), round: self.round, backend: BackendKind::Container }
    }

    fn set_round(&mut self, round: u32) {
        self.round = round;
    }

    fn execute(&mut self, cmd: &AtomicCommand) -> Result<ExecutionRecord, SandboxError> {
        if self.closed {
            return Err(SandboxError::SessionClosed);
        }
        // `timeout` inside the container stops the process; the outer watchdog covers a wedged daemon.
        let inner = format!("timeout {} sh -lc {}", cmd.timeout().ceil() as u64, shell_quote(cmd.text()));
        let out = self.docker.run(&["exec", &self.name, "sh", "-c", &inner], cmd.timeout() + WATCHDOG_GRACE_SECS)?;
        let timed_out = out.timed_out || out.exit_code == super::TIMEOUT_EXIT;
        Ok(ExecutionRecord::new(cmd.clone(), out.exit_code, &out.stdout, &out.stderr, out.duration.min(cmd.timeout()), timed_out))
    }

    fn snapshot(&mut self) -> Result<SnapshotId, SandboxError> {
        if self.closed {
            return Err(SandboxError::SessionClosed);
        }
        let tag = format!("{}-snap:{}", self.name, self.snapshots.len() + 1);
        self.docker.run_ok(&["commit", &self.name, &tag])?;
        self.snapshots.push(tag.clone());
        Ok(SnapshotId { id: tag, round: self.round })
    }

    fn restore(&mut self, id: &SnapshotId) -> Result<EnvironmentState, SandboxError> {
        if self.closed || !self.snapshots.contains(&id.id) {
            return Err(SandboxError::SnapshotExpired(id.id.clone()));
        }
        self.docker.run_ok(&["rm", "-f", &self.name])?;
        self.docker.run_ok(&["run", "-d", "--name", &self.name, "-w", "/repo", &id.id, "sleep", "infinity"])?;
        Ok(self.state())
    }

    fn check_solved(&mut self) -> Result<bool, SandboxError> {
        let cmd = AtomicCommand::new(&self.test_command, crate::command::Origin::DockerfileReplay)
            .map_err(|e| SandboxError::Backend(e.to_string()))?;
        let rec = self.execute(&cmd)?;
        // 0: tests passed, 1: tests ran and some failed. Both mean the environment launches tests.
        Ok(matches!(rec.exit_code, 0 | 1))
    }

    fn repo_tree(&self) -> Option<RepoTree> {
        RepoTree::from_dir(&self.repo).ok()
    }

    fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        let _ = self.docker.run_ok(&["rm", "-f", &self.name]);
        for tag in self.snapshots.drain(..) {
            let _ = self.docker.run_ok(&["rmi", "-f", &tag]);
        }
    }
}

impl Drop for ContainerSandbox {
    fn drop(&mut self) {
        self.close();
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}
