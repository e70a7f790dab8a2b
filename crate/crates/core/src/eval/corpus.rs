//! Runs every scenario of a corpus directory and aggregates the results.
//!
//! Layout: `<corpus>/<scenario>/scenario.json`, recorded model replies in
//! `transcript.json` (full variant) or `transcript.<variant>.json`, and an
//! optional `<corpus>/corpus.toml`:
//!
//! ```toml
//! t_max = 30
//! [scenarios.install-timeout]
//! wall_clock_budget_secs = 1800
//! expected_status = "time_exhausted"
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{run_session, SessionConfig, SessionOutcome, SessionStatus, Variant};
use crate::dockerfile::{consolidate_unchecked, provenance_json, verify_build, BuildResult, DockerfileConfig};
use crate::expert::RuleSet;
use crate::llm::{HeuristicProvider, Provider, RecordingProvider, ReplayProvider, Transcript, UsageLedger};
use crate::sandbox::{SimSandbox, SimScenario};

use super::{
    categorize_failure, dgsr, display_percent, ebsr, failure_table, judge_faults, outcome_record, process_metrics,
    EvalError, FailureRow, OutcomeRecord, ProcessJudgment, ProcessMetrics,
};

pub const CORPUS_CONFIG_FILE: &str = "corpus.toml";
const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOverrides {
    pub t_max: Option<u32>,
    pub wall_clock_budget_secs: Option<f64>,
    pub expected_status: Option<SessionStatus>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFile {
    pub t_max: Option<u32>,
    pub wall_clock_budget_secs: Option<f64>,
    pub context_token_budget: Option<u64>,
    #[serde(default)]
    pub scenarios: BTreeMap<String, ScenarioOverrides>,
}

/// Reads `corpus.toml`, or the defaults when the file is absent.
pub fn load_corpus_config(dir: &Path) -> Result<CorpusFile, EvalError> {
    let path = dir.join(CORPUS_CONFIG_FILE);
    if !path.exists() {
        return Ok(CorpusFile::default());
    }
    let text = fs::read_to_string(&path)?;
    toml::from_str(&text).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))
}

/// Where model replies come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    /// Recorded transcripts next to each scenario.
    Replay,
    /// The built-in rule-of-thumb planner, nothing recorded.
    Heuristic,
    /// The built-in planner, with transcripts written next to each scenario.
    Record,
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub session: SessionConfig,
    pub mode: ProviderMode,
    /// Worker threads; 0 uses rayon's default.
    pub workers: usize,
    /// Per-scenario logs, outcomes and Dockerfiles go here when set.
    pub out_dir: Option<PathBuf>,
    pub ruleset: RuleSet,
    pub dockerfile: DockerfileConfig,
    /// Applied after `corpus.toml`, so command-line flags win.
    pub force_t_max: Option<u32>,
    pub force_time_budget: Option<f64>,
}

impl CorpusConfig {
    pub fn new(session: SessionConfig, mode: ProviderMode) -> Self {
        CorpusConfig {
            session,
            mode,
            workers: 0,
            out_dir: None,
            ruleset: RuleSet::seed(),
            dockerfile: DockerfileConfig::default(),
            force_t_max: None,
            force_time_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub status: Option<SessionStatus>,
    pub expected_status: Option<SessionStatus>,
    pub rounds_used: u32,
    pub elapsed_secs: f64,
    pub usage: UsageLedger,
    pub outcome: Option<OutcomeRecord>,
    pub judgments: Vec<ProcessJudgment>,
    pub dockerfile: Option<String>,
    pub build: Option<BuildResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    /// Set when the scenario could not be evaluated at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScenarioResult {
    fn failed(name: &str, error: String) -> Self {
        ScenarioResult {
            name: name.to_string(),
            status: None,
            expected_status: None,
            rounds_used: 0,
            elapsed_secs: 0.0,
            usage: UsageLedger::default(),
            outcome: None,
            judgments: Vec::new(),
            dockerfile: None,
            build: None,
            abort_reason: None,
            error: Some(error),
        }
    }

    /// No expectation counts as a match.
    pub fn matches_expected(&self) -> bool {
        match self.expected_status {
            Some(e) => self.status == Some(e),
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub corpus: String,
    pub variant: Variant,
    pub scenarios: Vec<ScenarioResult>,
    pub evaluated: usize,
    pub errors: usize,
    pub solved: usize,
    pub dgsr: Option<f64>,
    pub ebsr: Option<f64>,
    pub process: Option<ProcessMetrics>,
    pub failure_table: Vec<FailureRow>,
    pub usage: UsageLedger,
}

pub fn transcript_file(variant: Variant) -> String {
    match variant {
        Variant::Full => "transcript.json".to_string(),
        v => format!("transcript.{}.json", v.as_str()),
    }
}

fn scenario_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>, EvalError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.join(SCENARIO_FILE).is_file() {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((name, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(EvalError::CorpusEmpty(dir.display().to_string()));
    }
    Ok(out)
}

impl CorpusFile {
    /// Layers the corpus-wide settings, then the scenario's own, onto `s`.
    /// Returns the scenario's expected status, if declared.
    pub fn apply(&self, name: &str, s: &mut SessionConfig) -> Option<SessionStatus> {
        if let Some(t) = self.t_max {
            s.t_max = t;
        }
        if let Some(b) = self.wall_clock_budget_secs {
            s.wall_clock_budget_secs = b;
        }
        if let Some(c) = self.context_token_budget {
            s.context_token_budget = c;
        }
        let over = self.scenarios.get(name).cloned().unwrap_or_default();
        if let Some(t) = over.t_max {
            s.t_max = t;
        }
        if let Some(b) = over.wall_clock_budget_secs {
            s.wall_clock_budget_secs = b;
        }
        over.expected_status
    }
}

fn session_for(name: &str, cfg: &CorpusConfig, file: &CorpusFile) -> (SessionConfig, Option<SessionStatus>) {
    let mut s = cfg.session.clone();
    let expected = file.apply(name, &mut s);
    if let Some(t) = cfg.force_t_max {
        s.t_max = t;
    }
    if let Some(b) = cfg.force_time_budget {
        s.wall_clock_budget_secs = b;
    }
    s.log_path = cfg.out_dir.as_ref().map(|o| o.join(name).join("trajectory.jsonl"));
    (s, expected)
}

fn write_artifacts(dir: &Path, outcome: &SessionOutcome, result: &ScenarioResult, provenance: &str) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(outcome).expect("outcome serializes");
    json.push('\n');
    fs::write(dir.join("outcome.json"), json)?;
    if let Some(d) = &result.dockerfile {
        fs::write(dir.join("Dockerfile"), d)?;
        fs::write(dir.join("provenance.json"), provenance)?;
    }
    if let Some(b) = &result.build {
        fs::write(dir.join("build.log"), &b.log)?;
    }
    Ok(())
}

fn run_one(name: &str, path: &Path, cfg: &CorpusConfig, file: &CorpusFile) -> ScenarioResult {
    let scenario = match SimScenario::load(&path.join(SCENARIO_FILE)) {
        Ok(s) => s,
        Err(e) => return ScenarioResult::failed(name, e.to_string()),
    };
    let (session, expected_status) = session_for(name, cfg, file);
    if let Some(out) = &cfg.out_dir {
        if let Err(e) = fs::create_dir_all(out.join(name)) {
            return ScenarioResult::failed(name, e.to_string());
        }
    }
    let transcript_path = path.join(transcript_file(session.variant));
    let mut recording = None;
    let provider: Box<dyn Provider> = match cfg.mode {
        ProviderMode::Replay => match Transcript::load(&transcript_path) {
            Ok(t) => Box::new(ReplayProvider::new(t)),
            Err(e) => return ScenarioResult::failed(name, e.to_string()),
        },
        ProviderMode::Heuristic => Box::new(HeuristicProvider::new()),
        ProviderMode::Record => {
            let r = RecordingProvider::new(Box::new(HeuristicProvider::new()), name);
            recording = Some(r.handle());
            Box::new(r)
        }
    };
    let mut sandbox = match SimSandbox::new(scenario.clone()) {
        Ok(s) => s,
        Err(e) => return ScenarioResult::failed(name, e.to_string()),
    };
    let outcome = match run_session(name, &mut sandbox, provider, cfg.ruleset.clone(), &session) {
        Ok(o) => o,
        Err(e) => return ScenarioResult::failed(name, e.to_string()),
    };
    if let Some(handle) = recording {
        let t = handle.lock().expect("recording lock").to_json();
        if let Err(e) = fs::write(&transcript_path, t) {
            return ScenarioResult::failed(name, format!("{}: {e}", transcript_path.display()));
        }
    }

    let artifact = consolidate_unchecked(&outcome.trajectory, &cfg.dockerfile);
    let build = SimSandbox::new(scenario.clone())
        .map_err(|e| e.to_string())
        .and_then(|mut fresh| verify_build(&artifact, &mut fresh).map_err(|e| e.to_string()));
    let build = match build {
        Ok(b) => b,
        Err(e) => return ScenarioResult::failed(name, format!("replay: {e}")),
    };
    let category = (!outcome.solved() || !build.solved).then(|| categorize_failure(&outcome, Some(&scenario.repo_tree())));
    let record = outcome_record(&outcome, build.built, build.solved, category);
    let result = ScenarioResult {
        name: name.to_string(),
        status: Some(outcome.status),
        expected_status,
        rounds_used: outcome.rounds_used,
        elapsed_secs: outcome.elapsed_secs,
        usage: outcome.usage.clone(),
        outcome: Some(record),
        judgments: judge_faults(&outcome, &scenario.faults),
        dockerfile: Some(artifact.rendered.clone()),
        build: Some(build),
        abort_reason: outcome.abort_reason.clone(),
        error: None,
    };
    if let Some(out) = &cfg.out_dir {
        if let Err(e) = write_artifacts(&out.join(name), &outcome, &result, &provenance_json(&artifact)) {
            return ScenarioResult::failed(name, e.to_string());
        }
    }
    result
}

/// Runs the corpus. One scenario failing to load or run never stops the
/// others; it is reported with an `error` and left out of the rates.
pub fn run_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<CorpusReport, EvalError> {
    let scenarios = scenario_dirs(dir)?;
    let file = load_corpus_config(dir)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if cfg.workers > 0 {
        builder = builder.num_threads(cfg.workers);
    }
    let pool = builder.build().map_err(|e| EvalError::Config(e.to_string()))?;
    let mut results: Vec<ScenarioResult> =
        pool.install(|| scenarios.par_iter().map(|(name, path)| run_one(name, path, cfg, &file)).collect());
    results.sort_by(|a, b| a.name.cmp(&b.name));

    let records: Vec<OutcomeRecord> = results.iter().filter_map(|r| r.outcome.clone()).collect();
    let judgments: Vec<ProcessJudgment> = results.iter().flat_map(|r| r.judgments.clone()).collect();
    let categories: Vec<_> = records.iter().filter_map(|r| r.failure_category).collect();
    let mut usage = UsageLedger::default();
    for r in &results {
        usage.merge(&r.usage, &cfg.session.prices);
    }
    let report = CorpusReport {
        corpus: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        variant: cfg.session.variant,
        evaluated: records.len(),
        errors: results.iter().filter(|r| r.error.is_some()).count(),
        solved: results.iter().filter(|r| r.status == Some(SessionStatus::Solved)).count(),
        dgsr: dgsr(&records).ok(),
        ebsr: ebsr(&records).ok(),
        process: process_metrics(&judgments).ok(),
        failure_table: failure_table(&categories),
        usage,
        scenarios: results,
    };
    if let Some(out) = &cfg.out_dir {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.json"), report_json(&report))?;
        fs::write(out.join("report.txt"), report_text(&report))?;
    }
    Ok(report)
}

pub fn report_json(report: &CorpusReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), display_percent)
}

/// Plain-text summary: per-scenario rows, rates, process metrics and failure causes.
pub fn report_text(report: &CorpusReport) -> String {
    let mut s = format!("corpus: {}  variant: {}\n\n", report.corpus, report.variant.as_str());
    s.push_str(&format!("{:<32} {:<17} {:>6} {:>9} {:>8} {:>5} {:>4}\n", "scenario", "status", "rounds", "time(s)", "tokens", "built", "env"));
    for r in &report.scenarios {
        match &r.error {
            Some(e) => s.push_str(&format!("{:<32} error: {e}\n", r.name)),
            None => {
                let o = r.outcome.as_ref();
                let yn = |b: bool| if b { "yes" } else { "no" };
                let mut line = format!(
                    "{:<32} {:<17} {:>6} {:>9.1} {:>8} {:>5} {:>4}",
                    r.name,
                    r.status.map_or("-", |st| st.as_str()),
                    r.rounds_used,
                    r.elapsed_secs,
                    r.usage.total_tokens(),
                    yn(o.map_or(false, |o| o.dockerfile_built)),
                    yn(o.map_or(false, |o| o.environment_built)),
                );
                if !r.matches_expected() {
                    line.push_str(&format!("  (expected {})", r.expected_status.map_or("-", |e| e.as_str())));
                }
                s.push_str(line.trim_end());
                s.push('\n');
            }
        }
    }
    s.push_str(&format!(
        "\nevaluated {}  errors {}  solved {}\nDGSR {}%  EBSR {}%\n",
        report.evaluated,
        report.errors,
        report.solved,
        pct(report.dgsr),
        pct(report.ebsr)
    ));
    if let Some(p) = &report.process {
        s.push_str(&format!(
            "error type P {}%  R {}%  F1 {}%  description {}%  fix {}%\n",
            display_percent(p.precision),
            display_percent(p.recall),
            display_percent(p.f1),
            display_percent(p.description_acc),
            display_percent(p.fix_acc)
        ));
    }
    s.push_str("\nfailure causes\n");
    for row in &report.failure_table {
        s.push_str(&format!("{:<32} {:>3} {:>6.1}%\n", row.category.as_str(), row.count, row.percent));
    }
    s.push_str(&format!("\ntokens {}  calls {}  cost ${:.4}\n", report.usage.total_tokens(), report.usage.calls, report.usage.cost));
    s
}
