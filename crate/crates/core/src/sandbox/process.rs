use std::io::Read;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{SandboxError, TIMEOUT_EXIT};

/// Output of a child process run under a watchdog.
#[derive(Debug, Clone)]
pub struct ProcessOutput {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration: f64,
    pub timed_out: bool,
}

/// Runs `cmd`, killing it once `timeout` seconds pass. Control returns
/// shortly after the deadline even if the child ignores signals.
pub fn run_with_timeout(mut cmd: Command, timeout: f64) -> Result<ProcessOutput, SandboxError> {
    let start = Instant::now();
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| SandboxError::Backend(format!("spawn failed: {e}")))?;

    let mut out_pipe = child.stdout.take().expect("piped");
    let mut err_pipe = child.stderr.take().expect("piped");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out_pipe.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err_pipe.read_to_end(&mut buf);
        buf
    });

    let deadline = Duration::from_secs_f64(timeout.max(0.001));
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if start.elapsed() >= deadline => {
                timed_out = true;
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            Ok(None) => thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(SandboxError::Backend(e.to_string())),
        }
    };

    // Readers can stall if a grandchild holds the pipe open; do not wait on them forever.
    let collect = |h: thread::JoinHandle<Vec<u8>>| -> String {
        let grace = Instant::now();
        while !h.is_finished() && grace.elapsed() < Duration::from_secs(1) {
            thread::sleep(Duration::from_millis(5));
        }
        if h.is_finished() {
            String::from_utf8_lossy(&h.join().unwrap_or_default()).into_owned()
        } else {
            String::new()
        }
    };
    let stdout = collect(out_reader);
    let stderr = collect(err_reader);
    let exit_code = match status {
        Some(s) => s.code().unwrap_or(-1),
        None => TIMEOUT_EXIT,
    };
    Ok(ProcessOutput { exit_code, stdout, stderr, duration: start.elapsed().as_secs_f64(), timed_out })
}
