//! Per-record diagnosis: three-state verdicts, read-only evidence tools,
//! structured reports and the self-evolving rule store.

mod rules;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{classify_command, validate_tool_command, AtomicCommand, CommandClass, Origin, Rejection};
use crate::llm::{ChatTurn, Gateway, LlmError};
use crate::sandbox::{clip_tail, ExecutionRecord, Sandbox, SandboxError};

pub use rules::{
    evolve_rules, render_template, signature_regex, ExitMatch, Feedback, MatchInput, Priority, Rule, RuleCategory,
    RuleError, RuleOrigin, RuleSet, Trigger, DEFAULT_CAP, LEARNED_PRIORITY,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DESCRIPTION_CAP: usize = 400;
pub const SUMMARY_CAP: usize = 160;
pub const MAX_TOOLS: usize = 3;
pub const MAX_REPAIRS: usize = 4;
/// Rules below this priority stay dormant.
pub const ACTIVATION: Priority = match Priority::from_milli(250) {
    Some(p) => p,
    None => Priority::MIN,
};
const TOOL_TIMEOUT_SECS: f64 = 60.0;
/// Output tail shown to the model per stream.
const PROMPT_OUTPUT_CAP: usize = 3000;
/// Output tail kept in the report for rule coverage checks.
const REPORT_OUTPUT_CAP: usize = 4096;

pub const EXPERT_SYSTEM_PROMPT: &str = "You are the diagnostic expert of an environment-configuration system. \
You receive one executed shell command with its exit code and output, evidence gathered by read-only tools, \
and the diagnostic rules that matched. Classify the action and reply with exactly these lines:\n\
VERDICT: success | failure | potential_risk\n\
ERROR_TYPE: dependency_conflict | missing_dependency | toolchain_mismatch | missing_file | permission | network | timeout | syntax_or_usage | unknown\n\
DESCRIPTION: one or two sentences on the root cause\n\
REPAIR: <single-line shell command>   (zero or more, in execution order)\n\
RISK: <note>   (zero or more)\n";

const FORMAT_RETRY: &str = "Your reply did not contain a valid VERDICT/ERROR_TYPE/DESCRIPTION block. Reply again using only those lines plus optional REPAIR and RISK lines.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Failure,
    PotentialRisk,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Success => "success",
            Verdict::Failure => "failure",
            Verdict::PotentialRisk => "potential_risk",
        }
    }

    pub fn parse(s: &str) -> Option<Verdict> {
        [Verdict::Success, Verdict::Failure, Verdict::PotentialRisk].into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    DependencyConflict,
    MissingDependency,
    ToolchainMismatch,
    MissingFile,
    Permission,
    Network,
    Timeout,
    SyntaxOrUsage,
    Unknown,
}

impl ErrorType {
    pub const ALL: [ErrorType; 9] = [
        ErrorType::DependencyConflict,
        ErrorType::MissingDependency,
        ErrorType::ToolchainMismatch,
        ErrorType::MissingFile,
        ErrorType::Permission,
        ErrorType::Network,
        ErrorType::Timeout,
        ErrorType::SyntaxOrUsage,
        ErrorType::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::DependencyConflict => "dependency_conflict",
            ErrorType::MissingDependency => "missing_dependency",
            ErrorType::ToolchainMismatch => "toolchain_mismatch",
            ErrorType::MissingFile => "missing_file",
            ErrorType::Permission => "permission",
            ErrorType::Network => "network",
            ErrorType::Timeout => "timeout",
            ErrorType::SyntaxOrUsage => "syntax_or_usage",
            ErrorType::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<ErrorType> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub tool_command: AtomicCommand,
    pub record: ExecutionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub schema_version: u32,
    pub command: AtomicCommand,
    pub verdict: Verdict,
    pub error_type: ErrorType,
    pub description: String,
    pub repair_commands: Vec<AtomicCommand>,
    pub risk_suggestions: Vec<String>,
    pub evidence: Vec<Evidence>,
    pub summary: String,
    /// Rule that produced each repair command; `None` for model repairs.
    pub repair_sources: Vec<Option<String>>,
    pub tool_rules: Vec<String>,
    pub risk_rules: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_tools: Vec<(String, Rejection)>,
    /// Key error line, the trigger for rules learned from this report.
    pub signature: Option<String>,
    pub exit_code: i32,
    pub timed_out: bool,
    pub output_tail: Option<String>,
}

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error(transparent)]
    Model(#[from] LlmError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertConfig {
    pub repair_timeout: f64,
    pub activation: Priority,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig { repair_timeout: crate::command::DEFAULT_TIMEOUT_SECS, activation: ACTIVATION }
    }
}

fn clip_chars(s: &str, cap: usize) -> String {
    if s.chars().count() <= cap {
        return s.to_string();
    }
    let mut out: String = s.chars().take(cap.saturating_sub(3)).collect();
    out.push_str("...");
    out
}

/// One-line context summary: verdict, error type (unless success), repair count.
pub fn summarize_for_context(report: &DiagnosticReport) -> String {
    let line = match report.verdict {
        Verdict::Success => format!("success :: {}", report.command.text()),
        v => format!(
            "{} {} repairs={} :: {}",
            v.as_str(),
            report.error_type.as_str(),
            report.repair_commands.len(),
            report.command.text()
        ),
    };
    clip_chars(&line, SUMMARY_CAP)
}

/// Lines that best identify an error, most specific first.
const KEY_LINE_MARKERS: &[&str] = &[
    " depends on ",
    "No module named",
    "No matching distribution found for",
    "can't find Rust compiler",
    "failed: No such file or directory",
    "Permission denied",
    "Read timed out",
    "Connection refused",
    "Could not open requirements file",
    "not installable",
    "not found",
    "no such option",
    "Killed",
    "out of memory",
    "Error",
    "ERROR",
    "error",
];

/// Picks the most informative error line from output.
pub fn key_error_line(output: &str) -> Option<String> {
    for marker in KEY_LINE_MARKERS {
        if let Some(line) = output.lines().filter(|l| l.contains(marker)).last() {
            let line = line.trim();
            return Some(clip_chars(line, 200));
        }
    }
    None
}

/// Keyword classification used to pick tools before the model is asked.
pub fn classify_output(record: &ExecutionRecord) -> ErrorType {
    if record.timed_out {
        return ErrorType::Timeout;
    }
    let out = record.combined_output();
    let has = |needles: &[&str]| needles.iter().any(|n| out.contains(n));
    if record.exit_code == 0 {
        return ErrorType::Unknown;
    }
    if has(&["ResolutionImpossible", "conflicting dependencies", " depends on ", "incompatible"]) {
        ErrorType::DependencyConflict
    } else if has(&["NewConnectionError", "Connection refused", "Read timed out", "ReadTimeoutError", "Temporary failure in name resolution", "Connection reset", "SSLError"]) {
        ErrorType::Network
    } else if has(&["failed: No such file or directory", "can't find Rust compiler", "C compiler", "gcc: not found", "cmake: not found"]) {
        ErrorType::ToolchainMismatch
    } else if has(&["Permission denied", "[Errno 13]"]) {
        ErrorType::Permission
    } else if has(&["No module named", "ModuleNotFoundError", "No matching distribution", "Could not find a version", "command not found"]) {
        ErrorType::MissingDependency
    } else if has(&["No such file or directory", "Could not open requirements file", "not installable", "file or directory not found", "does not exist"]) {
        ErrorType::MissingFile
    } else if has(&["no such option", "Usage:", "SyntaxError", "Invalid requirement", "unknown command"]) {
        ErrorType::SyntaxOrUsage
    } else {
        ErrorType::Unknown
    }
}

/// Parsed model verdict block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVerdict {
    pub verdict: Verdict,
    pub error_type: ErrorType,
    pub description: String,
    pub repairs: Vec<String>,
    pub risks: Vec<String>,
}

pub fn parse_verdict_block(text: &str) -> Result<ModelVerdict, String> {
    let mut verdict = None;
    let mut error_type = None;
    let mut description = String::new();
    let mut repairs = Vec::new();
    let mut risks = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let Some((key, value)) = line.split_once(':') else { continue };
        let value = value.trim();
        match key.trim() {
            "VERDICT" => verdict = Some(Verdict::parse(value).ok_or_else(|| format!("bad verdict `{value}`"))?),
            "ERROR_TYPE" => error_type = Some(ErrorType::parse(value).ok_or_else(|| format!("bad error type `{value}`"))?),
            "DESCRIPTION" => description = value.to_string(),
            "REPAIR" if !value.is_empty() => repairs.push(value.trim_matches('`').to_string()),
            "RISK" if !value.is_empty() => risks.push(value.to_string()),
            _ => {}
        }
    }
    let verdict = verdict.ok_or("missing VERDICT line")?;
    let error_type = match (verdict, error_type) {
        (_, Some(t)) => t,
        (Verdict::Success, None) => ErrorType::Unknown,
        (_, None) => return Err("missing ERROR_TYPE line".into()),
    };
    if verdict == Verdict::Failure && description.is_empty() {
        return Err("failure without DESCRIPTION".into());
    }
    Ok(ModelVerdict { verdict, error_type, description, repairs, risks })
}

/// The expert's user turn: record, evidence and matching rules.
pub fn render_expert_prompt(record: &ExecutionRecord, evidence: &[Evidence], rules: &[(String, Priority, RuleCategory, String)]) -> String {
    let mut s = String::new();
    s.push_str(&format!("Command: {}\n", record.command.text()));
    s.push_str(&format!("Exit code: {}\n", record.exit_code));
    s.push_str(&format!("Timed out: {}\n", if record.timed_out { "yes" } else { "no" }));
    s.push_str("--- stdout (tail) ---\n");
    s.push_str(&clip_tail(&record.stdout, PROMPT_OUTPUT_CAP).0);
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s.push_str("--- stderr (tail) ---\n");
    s.push_str(&clip_tail(&record.stderr, PROMPT_OUTPUT_CAP).0);
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s.push_str("--- evidence ---\n");
    for e in evidence {
        s.push_str(&format!("$ {}\n[exit {}]\n", e.tool_command.text(), e.record.exit_code));
        let out = clip_tail(&e.record.combined_output(), PROMPT_OUTPUT_CAP).0;
        s.push_str(&out);
        if !out.is_empty() && !out.ends_with('\n') {
            s.push('\n');
        }
    }
    s.push_str("--- matching rules ---\n");
    for (id, p, cat, effect) in rules {
        let cat = match cat {
            RuleCategory::RepairSuggestion => "repair",
            RuleCategory::ToolCreation => "tool",
            RuleCategory::RiskAssessment => "risk",
        };
        s.push_str(&format!("- {id} ({cat}, {p}): {effect}\n"));
    }
    s.push_str("--- end ---\n");
    s
}

fn finish(mut report: DiagnosticReport) -> DiagnosticReport {
    report.description = clip_chars(report.description.trim(), DESCRIPTION_CAP);
    if report.verdict == Verdict::Failure && report.description.is_empty() {
        report.description = format!("command exited with status {}", report.exit_code);
    }
    if report.verdict == Verdict::Success {
        report.repair_commands.clear();
        report.repair_sources.clear();
    }
    debug_assert!(report.evidence.iter().all(|e| classify_command(&e.tool_command) != CommandClass::Mutating));
    report.summary = summarize_for_context(&report);
    report
}

fn base_report(record: &ExecutionRecord) -> DiagnosticReport {
    DiagnosticReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: record.command.clone(),
        verdict: Verdict::Success,
        error_type: ErrorType::Unknown,
        description: String::new(),
        repair_commands: Vec::new(),
        risk_suggestions: Vec::new(),
        evidence: Vec::new(),
        summary: String::new(),
        repair_sources: Vec::new(),
        tool_rules: Vec::new(),
        risk_rules: Vec::new(),
        rejected_tools: Vec::new(),
        signature: None,
        exit_code: record.exit_code,
        timed_out: record.timed_out,
        output_tail: None,
    }
}

/// The ablation baseline: verdict from the exit code alone. No tools,
/// no model, no repairs.
pub fn static_diagnose(record: &ExecutionRecord) -> DiagnosticReport {
    let mut r = base_report(record);
    if !record.succeeded() {
        r.verdict = Verdict::Failure;
        r.error_type = if record.timed_out { ErrorType::Timeout } else { ErrorType::Unknown };
        r.description = if record.timed_out {
            "command timed out".to_string()
        } else {
            format!("command exited with status {}", record.exit_code)
        };
    }
    finish(r)
}

/// Full diagnosis pipeline: fast path, tools, model verdict, repair merge.
pub fn diagnose(
    record: &ExecutionRecord,
    ruleset: &RuleSet,
    sandbox: &mut dyn Sandbox,
    gateway: &mut Gateway,
    config: &ExpertConfig,
) -> Result<DiagnosticReport, ExpertError> {
    let output = record.combined_output();
    let mut report = base_report(record);
    report.output_tail = Some(clip_tail(&output, REPORT_OUTPUT_CAP).0);
    let provisional = classify_output(record);
    let input = MatchInput {
        command: record.command.text(),
        exit_code: record.exit_code,
        timed_out: record.timed_out,
        output: &output,
        error_type: Some(provisional),
    };

    let risk_hits = ruleset.matching(RuleCategory::RiskAssessment, &input, config.activation);
    if record.succeeded() && risk_hits.is_empty() {
        return Ok(finish(report));
    }
    for (rule, vars) in &risk_hits {
        report.risk_rules.push(rule.id.clone());
        if let Some(note) = render_template(&rule.effect, vars) {
            report.risk_suggestions.push(note);
        }
    }

    // Evidence tools.
    let mut tried = Vec::new();
    for (rule, vars) in ruleset.matching(RuleCategory::ToolCreation, &input, config.activation) {
        if report.evidence.len() >= MAX_TOOLS {
            break;
        }
        let Some(text) = render_template(&rule.effect, &vars) else { continue };
        if tried.contains(&text) {
            continue;
        }
        tried.push(text.clone());
        let cmd = match AtomicCommand::with_timeout(&text, Origin::ExpertTool, TOOL_TIMEOUT_SECS) {
            Ok(c) => c,
            Err(_) => {
                report.rejected_tools.push((text, Rejection::NotSingleLine));
                continue;
            }
        };
        if let Err(why) = validate_tool_command(&cmd) {
            log::warn!("rejected diagnostic tool `{text}`: {why}");
            report.rejected_tools.push((text, why));
            continue;
        }
        let rec = sandbox.execute(&cmd)?;
        report.tool_rules.push(rule.id.clone());
        report.evidence.push(Evidence { tool_command: cmd, record: rec });
    }

    // Model verdict.
    let shown: Vec<(String, Priority, RuleCategory, String)> = [RuleCategory::RepairSuggestion, RuleCategory::RiskAssessment]
        .into_iter()
        .flat_map(|c| ruleset.matching(c, &MatchInput { error_type: None, ..input }, config.activation))
        .filter(|(r, _)| r.trigger.error_type.is_none() || r.trigger.error_type == Some(provisional))
        .filter_map(|(r, v)| render_template(&r.effect, &v).map(|e| (r.id.clone(), r.priority, r.category, e)))
        .take(5)
        .collect();
    let prompt = render_expert_prompt(record, &report.evidence, &shown);
    let mut messages = vec![ChatTurn::system(EXPERT_SYSTEM_PROMPT), ChatTurn::user(prompt)];
    let first = gateway.complete(&messages)?;
    let parsed = match parse_verdict_block(&first.content) {
        Ok(v) => Ok(v),
        Err(e) => {
            log::warn!("expert reply unparseable ({e}); retrying once");
            messages.push(first);
            messages.push(ChatTurn::user(FORMAT_RETRY));
            let second = gateway.complete(&messages)?;
            parse_verdict_block(&second.content)
        }
    };
    let model = match parsed {
        Ok(v) => v,
        Err(e) => {
            report.verdict = Verdict::Failure;
            report.error_type = ErrorType::Unknown;
            report.description = format!("expert reply could not be parsed: {e}");
            report.signature = key_error_line(&output);
            return Ok(finish(report));
        }
    };

    report.verdict = model.verdict;
    report.error_type = model.error_type;
    report.description = model.description;
    if record.timed_out {
        report.verdict = Verdict::Failure;
        report.error_type = ErrorType::Timeout;
    }
    if report.verdict == Verdict::Success && !report.risk_rules.is_empty() {
        report.verdict = Verdict::PotentialRisk;
    }
    report.risk_suggestions.extend(model.risks);
    report.signature = if record.timed_out {
        Some(format!("timeout: {}", record.command.text().split_whitespace().take(2).collect::<Vec<_>>().join(" ")))
    } else {
        key_error_line(&output)
    };

    if report.verdict == Verdict::Failure {
        let final_input = MatchInput { error_type: Some(report.error_type), ..input };
        let mut seen: Vec<String> = Vec::new();
        let rule_repairs = ruleset
            .matching(RuleCategory::RepairSuggestion, &final_input, config.activation)
            .into_iter()
            .filter_map(|(r, v)| render_template(&r.effect, &v).map(|t| (Some(r.id.clone()), t)));
        let model_repairs = model.repairs.into_iter().map(|t| (None, t));
        for (source, text) in rule_repairs.chain(model_repairs) {
            if report.repair_commands.len() >= MAX_REPAIRS {
                break;
            }
            if seen.contains(&text) {
                continue;
            }
            seen.push(text.clone());
            match AtomicCommand::with_timeout(&text, Origin::ExpertRepair, config.repair_timeout) {
                Ok(cmd) => {
                    report.repair_commands.push(cmd);
                    report.repair_sources.push(source);
                }
                Err(e) => log::warn!("dropping invalid repair `{text}`: {e}"),
            }
        }
    }
    Ok(finish(report))
}
