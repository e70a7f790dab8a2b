//! The main configuration loop: plan a round of commands, execute them in
//! the sandbox, diagnose each record, apply repairs, evolve the rule store
//! and roll back when a round leaves the environment worse.

pub mod context;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::command::{parse_action_with_timeout, ActionSet, AtomicCommand, DEFAULT_TIMEOUT_SECS, TERMINATOR};
use crate::expert::{
    diagnose, evolve_rules, static_diagnose, DiagnosticReport, ExpertConfig, ExpertError, Feedback, RuleSet, Verdict,
};
use crate::llm::{ChatTurn, Gateway, LlmError, PriceTable, Provider, UsageLedger};
use crate::prior::{extract_prior, render_prior_prompt, PriorSummary};
use crate::sandbox::{ExecutionRecord, Sandbox, SandboxError, SnapshotId};

pub use context::build_context;

/// Sent once when a reply does not follow the action grammar.
pub const MALFORMED_RETRY_PROMPT: &str = "Your reply could not be parsed. Reply again with exactly one fenced bash block, \
one command per line, or with <<TERMINATE>> alone.";

pub const MAIN_SYSTEM_PROMPT: &str = "You are the main configuration agent. Your job is to make a Python repository's \
test suite runnable inside a fresh container. Each round, propose shell commands in one fenced bash block, one command \
per line. Every command is executed, then a diagnostic expert reports a verdict, an error type, a short root-cause \
description and repair suggestions. Prefer installing what the repository declares, keep commands non-interactive, \
and do not repeat commands that already succeeded.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// No repository prior in the context.
    NoPrior,
    /// Exit-code verdicts only: no tools, no repairs, no rule evolution.
    AblateDiagnosis,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrior => "no-prior",
            Variant::AblateDiagnosis => "ablate-diagnosis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub t_max: u32,
    pub wall_clock_budget_secs: f64,
    pub context_token_budget: u64,
    pub per_command_timeout_secs: f64,
    pub variant: Variant,
    pub prices: PriceTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            t_max: 100,
            wall_clock_budget_secs: 2.0 * 3600.0,
            context_token_budget: 8000,
            per_command_timeout_secs: DEFAULT_TIMEOUT_SECS,
            variant: Variant::Full,
            prices: PriceTable::default(),
            log_path: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.t_max == 0 {
            return Err("t_max must be at least 1".into());
        }
        if !(self.wall_clock_budget_secs > 0.0) {
            return Err("wall_clock_budget_secs must be positive".into());
        }
        if self.context_token_budget == 0 {
            return Err("context_token_budget must be positive".into());
        }
        if !(self.per_command_timeout_secs > 0.0 && self.per_command_timeout_secs.is_finite()) {
            return Err("per_command_timeout_secs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Solved,
    BudgetExhausted,
    TimeExhausted,
    Aborted,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Solved => "solved",
            SessionStatus::BudgetExhausted => "budget_exhausted",
            SessionStatus::TimeExhausted => "time_exhausted",
            SessionStatus::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decision {
    Continue,
    /// Failures were handed to expert repairs within the round.
    Repaired,
    Rollback { to_round: u32, snapshot: String },
    Terminate,
    /// The model reply did not parse; nothing was executed.
    Malformed { reason: String },
}

/// A repair command executed for the `for_command`-th record of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairEntry {
    pub for_command: usize,
    pub record: ExecutionRecord,
    pub report: DiagnosticReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub round: u32,
    pub action: ActionSet,
    pub records: Vec<ExecutionRecord>,
    pub reports: Vec<DiagnosticReport>,
    pub repairs: Vec<RepairEntry>,
    pub skipped: Vec<AtomicCommand>,
    pub decision: Decision,
    /// Snapshot taken after this round, if it left the environment good.
    pub snapshot: Option<SnapshotId>,
    pub rolled_back: bool,
    pub context_tokens: u64,
    pub ruleset_revision: u64,
}

impl TrajectoryEntry {
    pub fn has_failure(&self) -> bool {
        self.reports.iter().any(|r| r.verdict == Verdict::Failure)
    }

    /// Every record of the round, repairs right after the command they fix.
    pub fn ordered_records(&self) -> Vec<&ExecutionRecord> {
        let mut out = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            out.push(r);
            out.extend(self.repairs.iter().filter(|x| x.for_command == i).map(|x| &x.record));
        }
        out
    }

    pub fn all_reports(&self) -> impl Iterator<Item = &DiagnosticReport> {
        self.reports.iter().chain(self.repairs.iter().map(|r| &r.report))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub name: String,
    pub variant: Variant,
    pub status: SessionStatus,
    pub rounds_used: u32,
    /// Virtual time: the sum of every command, tool and repair duration.
    pub elapsed_secs: f64,
    pub usage: UsageLedger,
    pub prior: Option<PriorSummary>,
    pub trajectory: Vec<TrajectoryEntry>,
    pub final_ruleset: RuleSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

impl SessionOutcome {
    pub fn solved(&self) -> bool {
        self.status == SessionStatus::Solved
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Model(#[from] LlmError),
    #[error("trajectory log: {0}")]
    Log(#[from] std::io::Error),
    #[error("trajectory log line {line}: {reason}")]
    LogFormat { line: usize, reason: String },
}

impl From<ExpertError> for AgentError {
    fn from(e: ExpertError) -> Self {
        match e {
            ExpertError::Model(m) => AgentError::Model(m),
            ExpertError::Sandbox(s) => AgentError::Sandbox(s),
        }
    }
}

struct TrajectoryLog {
    out: Option<BufWriter<File>>,
}

impl TrajectoryLog {
    fn open(path: Option<&PathBuf>) -> Result<Self, std::io::Error> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(File::create(p)?))
            }
            None => None,
        };
        Ok(TrajectoryLog { out })
    }

    fn line(&mut self, value: serde_json::Value) -> Result<(), std::io::Error> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, &value)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        Ok(())
    }
}

/// What to do after a diagnosis.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyDecision {
    Continue,
    InjectRepairs(Vec<AtomicCommand>),
    Rollback(SnapshotId),
}

/// The repair and rollback policy. `last_rollback` is the snapshot the
/// previous round rolled back to; rolling back there again is refused.
pub fn apply_policy(reports: &[DiagnosticReport], snapshot: Option<&SnapshotId>, last_rollback: Option<&str>) -> PolicyDecision {
    let Some(failed) = reports.iter().find(|r| r.verdict == Verdict::Failure) else {
        return PolicyDecision::Continue;
    };
    if !failed.repair_commands.is_empty() {
        return PolicyDecision::InjectRepairs(failed.repair_commands.clone());
    }
    match snapshot {
        Some(s) if last_rollback != Some(s.id.as_str()) => PolicyDecision::Rollback(s.clone()),
        _ => PolicyDecision::Continue,
    }
}

struct Session<'a> {
    sandbox: &'a mut dyn Sandbox,
    gateway: Gateway,
    ruleset: RuleSet,
    config: &'a SessionConfig,
    expert: ExpertConfig,
    clock: f64,
    trajectory: Vec<TrajectoryEntry>,
    snapshot: Option<SnapshotId>,
    last_rollback: Option<String>,
    pending_risks: Vec<DiagnosticReport>,
    log: TrajectoryLog,
}

impl Session<'_> {
    fn out_of_time(&self) -> bool {
        self.clock >= self.config.wall_clock_budget_secs
    }

    fn run(&mut self, cmd: &AtomicCommand) -> Result<(ExecutionRecord, DiagnosticReport), AgentError> {
        let record = self.sandbox.execute(cmd)?;
        self.clock += record.duration;
        let report = match self.config.variant {
            Variant::AblateDiagnosis => static_diagnose(&record),
            _ => diagnose(&record, &self.ruleset, &mut *self.sandbox, &mut self.gateway, &self.expert)?,
        };
        self.clock += report.evidence.iter().map(|e| e.record.duration).sum::<f64>();
        Ok((record, report))
    }

    /// Executes the action set. A failure ends the round once its repairs ran.
    fn execute_round(&mut self, entry: &mut TrajectoryEntry) -> Result<(), AgentError> {
        let commands = entry.action.commands.clone();
        for (i, cmd) in commands.iter().enumerate() {
            if self.out_of_time() {
                entry.skipped.extend(commands[i..].iter().cloned());
                return Ok(());
            }
            let (record, report) = self.run(cmd)?;
            entry.records.push(record);
            entry.reports.push(report.clone());
            if report.verdict != Verdict::Failure {
                continue;
            }
            if let PolicyDecision::InjectRepairs(repairs) = apply_policy(std::slice::from_ref(&report), None, None) {
                for (j, repair) in repairs.iter().enumerate() {
                    if self.out_of_time() {
                        break;
                    }
                    let (rec, rep) = self.run(repair)?;
                    let feedback =
                        if rec.succeeded() { Feedback::RepairSucceeded { repair: j } } else { Feedback::RepairFailed { repair: j } };
                    evolve_rules(&mut self.ruleset, &report, feedback);
                    entry.repairs.push(RepairEntry { for_command: i, record: rec, report: rep });
                }
            }
            entry.skipped.extend(commands[i + 1..].iter().cloned());
            return Ok(());
        }
        Ok(())
    }

    /// One full round; returns whether the model asked to terminate.
    fn round(&mut self, round: u32, prior_text: &str) -> Result<bool, AgentError> {
        let config = self.config;
        self.sandbox.set_round(round);
        let ctx = build_context(prior_text, &self.trajectory, round, config.t_max, config.context_token_budget);
        let context_tokens = context::context_tokens(&ctx);
        let mut reply = self.gateway.complete(&ctx)?;
        let mut parsed = parse_action_with_timeout(&reply.content, round, config.per_command_timeout_secs);
        if let Err(e) = &parsed {
            // one retry with the parse error before the round counts as malformed
            let mut retry = ctx.clone();
            retry.push(reply.clone());
            retry.push(ChatTurn::user(format!("{MALFORMED_RETRY_PROMPT} ({e})")));
            reply = self.gateway.complete(&retry)?;
            parsed = parse_action_with_timeout(&reply.content, round, config.per_command_timeout_secs);
        }
        let (action, mut decision) = match parsed {
            Ok(a) => (a, Decision::Continue),
            Err(e) => {
                log::warn!("round {round}: malformed action: {e}");
                (ActionSet::empty(round), Decision::Malformed { reason: e.to_string() })
            }
        };
        let terminate = action.commands.is_empty() && reply.content.contains(TERMINATOR);
        let mut entry = TrajectoryEntry {
            round,
            action,
            records: Vec::new(),
            reports: Vec::new(),
            repairs: Vec::new(),
            skipped: Vec::new(),
            decision: Decision::Continue,
            snapshot: None,
            rolled_back: false,
            context_tokens,
            ruleset_revision: 0,
        };
        self.execute_round(&mut entry)?;

        // Risk predictions from the previous round are judged by this one.
        if config.variant != Variant::AblateDiagnosis {
            let feedback = if entry.has_failure() { Feedback::RiskConfirmed } else { Feedback::RiskUnfounded };
            for report in std::mem::take(&mut self.pending_risks) {
                evolve_rules(&mut self.ruleset, &report, feedback);
            }
            self.pending_risks.extend(entry.all_reports().filter(|r| r.verdict == Verdict::PotentialRisk).cloned());
        }

        if terminate {
            decision = Decision::Terminate;
        } else if matches!(decision, Decision::Continue) {
            match apply_policy(&entry.reports, self.snapshot.as_ref(), self.last_rollback.as_deref()) {
                PolicyDecision::Continue => {}
                PolicyDecision::InjectRepairs(_) => decision = Decision::Repaired,
                PolicyDecision::Rollback(snap) => {
                    self.sandbox.restore(&snap)?;
                    entry.rolled_back = true;
                    for e in self.trajectory.iter_mut().filter(|e| e.round > snap.round) {
                        e.rolled_back = true;
                    }
                    self.log.line(json!({"type": "rollback", "round": round, "to_round": snap.round, "snapshot": snap.id}))?;
                    decision = Decision::Rollback { to_round: snap.round, snapshot: snap.id };
                }
            }
        }
        self.last_rollback = match &decision {
            Decision::Rollback { snapshot, .. } => Some(snapshot.clone()),
            _ => None,
        };
        if !entry.rolled_back && !entry.records.is_empty() && round_recovered(&entry) {
            let snap = self.sandbox.snapshot()?;
            entry.snapshot = Some(snap.clone());
            self.snapshot = Some(snap);
        }
        entry.decision = decision;
        entry.ruleset_revision = self.ruleset.revision();
        self.log.line(json!({"type": "round", "entry": entry}))?;
        self.trajectory.push(entry);
        Ok(terminate)
    }

    fn drive(&mut self, prior_text: &str) -> Result<(SessionStatus, Option<String>), AgentError> {
        if self.sandbox.check_solved()? {
            return Ok((SessionStatus::Solved, None));
        }
        let mut round = 0;
        loop {
            if round >= self.config.t_max {
                return Ok((SessionStatus::BudgetExhausted, None));
            }
            if self.out_of_time() {
                return Ok((SessionStatus::TimeExhausted, None));
            }
            round += 1;
            let terminate = self.round(round, prior_text)?;
            if self.sandbox.check_solved()? {
                return Ok((SessionStatus::Solved, None));
            }
            if terminate {
                return Ok((SessionStatus::Aborted, Some("the agent ended the session before the environment was solved".into())));
            }
        }
    }
}

/// A round counts as good when every failure in it was followed by a successful repair.
fn round_recovered(entry: &TrajectoryEntry) -> bool {
    entry.reports.iter().enumerate().all(|(i, r)| {
        r.verdict != Verdict::Failure || entry.repairs.iter().any(|x| x.for_command == i && x.record.succeeded())
    })
}

/// Runs one configuration session to completion. Provider and backend
/// failures end the session with status `aborted`; only a log file that
/// cannot be created is reported as an error.
pub fn run_session(
    name: &str,
    sandbox: &mut dyn Sandbox,
    provider: Box<dyn Provider>,
    ruleset: RuleSet,
    config: &SessionConfig,
) -> Result<SessionOutcome, AgentError> {
    let prior = match config.variant {
        Variant::NoPrior => None,
        _ => sandbox.repo_tree().map(|t| extract_prior(&t)),
    };
    let prior_text = prior.as_ref().map(render_prior_prompt).unwrap_or_else(|| context::NO_PRIOR.to_string());
    let mut log = TrajectoryLog::open(config.log_path.as_ref())?;
    log.line(json!({
        "type": "session",
        "name": name,
        "variant": config.variant,
        "t_max": config.t_max,
        "wall_clock_budget_secs": config.wall_clock_budget_secs,
        "context_token_budget": config.context_token_budget,
        "prior": prior,
    }))?;

    let mut s = Session {
        sandbox,
        gateway: Gateway::new(provider, config.prices),
        ruleset,
        config,
        expert: ExpertConfig { repair_timeout: config.per_command_timeout_secs, ..ExpertConfig::default() },
        clock: 0.0,
        trajectory: Vec::new(),
        snapshot: None,
        last_rollback: None,
        pending_risks: Vec::new(),
        log,
    };
    let (status, abort_reason) = match s.drive(&prior_text) {
        Ok(v) => v,
        Err(e) => {
            log::error!("session {name} aborted: {e}");
            (SessionStatus::Aborted, Some(e.to_string()))
        }
    };
    let usage = s.gateway.report_usage();
    let outcome_line = json!({
        "type": "outcome",
        "status": status,
        "rounds_used": s.trajectory.len(),
        "elapsed_secs": s.clock,
        "usage": usage,
        "ruleset_revision": s.ruleset.revision(),
        "abort_reason": abort_reason,
    });
    if let Err(e) = s.log.line(outcome_line) {
        log::error!("could not write the outcome line: {e}");
    }
    s.sandbox.close();
    Ok(SessionOutcome {
        name: name.to_string(),
        variant: config.variant,
        status,
        rounds_used: s.trajectory.len() as u32,
        elapsed_secs: s.clock,
        usage,
        prior,
        trajectory: s.trajectory,
        final_ruleset: s.ruleset,
        abort_reason,
    })
}

/// A session rebuilt from its JSONL trajectory log.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedSession {
    pub name: String,
    pub variant: Variant,
    /// Absent when the log stops before the outcome line.
    pub status: Option<SessionStatus>,
    pub trajectory: Vec<TrajectoryEntry>,
}

/// Parses a trajectory log. Rollback lines mark the rounds they undid,
/// including rounds logged before the rollback happened.
pub fn read_log(text: &str) -> Result<LoggedSession, AgentError> {
    let mut session = LoggedSession { name: String::new(), variant: Variant::Full, status: None, trajectory: Vec::new() };
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: String| AgentError::LogFormat { line: i + 1, reason };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        match v.get("type").and_then(|t| t.as_str()) {
            Some("session") => {
                session.name = v.get("name").and_then(|n| n.as_str()).unwrap_or_default().to_string();
                session.variant = serde_json::from_value(v["variant"].clone()).map_err(|e| bad(e.to_string()))?;
                seen_header = true;
            }
            Some("round") => {
                let entry: TrajectoryEntry = serde_json::from_value(v["entry"].clone()).map_err(|e| bad(e.to_string()))?;
                session.trajectory.push(entry);
            }
            Some("rollback") => {
                let to = v.get("to_round").and_then(|r| r.as_u64()).ok_or_else(|| bad("rollback without to_round".into()))?;
                for e in session.trajectory.iter_mut().filter(|e| u64::from(e.round) > to) {
                    e.rolled_back = true;
                }
            }
            Some("outcome") => {
                session.status = Some(serde_json::from_value(v["status"].clone()).map_err(|e| bad(e.to_string()))?);
            }
            other => return Err(bad(format!("unknown line type {other:?}"))),
        }
    }
    if !seen_header {
        return Err(AgentError::LogFormat { line: 1, reason: "missing session header".into() });
    }
    Ok(session)
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;
    use std::sync::{Arc, Mutex};

    use super::*;
    use crate::llm::Usage;
    use crate::sandbox::SimSandbox;

    /// Replies from a fixed script, then terminates; keeps every request.
    struct Scripted {
        replies: VecDeque<&'static str>,
        seen: Arc<Mutex<Vec<Vec<ChatTurn>>>>,
    }

    impl Provider for Scripted {
        fn complete(&mut self, messages: &[ChatTurn]) -> Result<(ChatTurn, Usage), LlmError> {
            self.seen.lock().unwrap().push(messages.to_vec());
            let text = self.replies.pop_front().unwrap_or(crate::command::TERMINATOR);
            Ok((ChatTurn::assistant(text), Usage { prompt_tokens: 10, completion_tokens: 5 }))
        }
    }

    fn session(replies: &[&'static str]) -> (SessionOutcome, Vec<Vec<ChatTurn>>) {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus/clean-requirements/scenario.json");
        let mut sb = SimSandbox::from_path(&path).unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let provider = Scripted { replies: replies.iter().copied().collect(), seen: Arc::clone(&seen) };
        let cfg = SessionConfig { t_max: 3, ..SessionConfig::default() };
        let outcome = run_session("t", &mut sb, Box::new(provider), RuleSet::seed(), &cfg).unwrap();
        let seen = seen.lock().unwrap().clone();
        (outcome, seen)
    }

    const GOOD: &str = "```bash\npip install -r requirements.txt\npip install pytest\n```";

    #[test]
    fn malformed_reply_gets_one_retry() {
        let (outcome, seen) = session(&["sure, installing now", GOOD]);
        assert_eq!(outcome.status, SessionStatus::Solved);
        assert_eq!(outcome.rounds_used, 1);
        let retry = &seen[1];
        assert!(retry.last().unwrap().content.starts_with(MALFORMED_RETRY_PROMPT));
        assert_eq!(retry[retry.len() - 2].content, "sure, installing now");
    }

    #[test]
    fn second_malformed_reply_loses_the_round() {
        let (outcome, _) = session(&["no commands", "still none", GOOD]);
        assert!(matches!(outcome.trajectory[0].decision, Decision::Malformed { .. }));
        assert!(outcome.trajectory[0].records.is_empty());
        assert_eq!(outcome.status, SessionStatus::Solved);
        assert_eq!(outcome.rounds_used, 2);
    }
}
