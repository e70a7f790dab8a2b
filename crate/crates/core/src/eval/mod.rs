//! Outcome metrics (DGSR, EBSR), process metrics over gold fault
//! annotations, the failure-category breakdown and the corpus runner.

mod corpus;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{SessionOutcome, SessionStatus};
use crate::dockerfile::is_test_launch;
use crate::expert::{DiagnosticReport, ErrorType, Verdict};
use crate::prior::{extract_prior, Manager, RepoTree};
use crate::sandbox::scenario::FaultAnnotation;

pub use corpus::{
    report_json, report_text, transcript_file, CorpusFile,
    load_corpus_config, run_corpus, CorpusConfig, CorpusReport, ProviderMode, ScenarioOverrides, ScenarioResult,
    CORPUS_CONFIG_FILE,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to aggregate")]
    EmptySet,
    #[error("corpus {0} contains no scenarios")]
    CorpusEmpty(String),
    #[error("corpus config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    HardwareInsufficiency,
    ConfigFilesMissing,
    DependencyInstallTimeout,
    UnitTestsMissing,
    RuntestTimeout,
    Other,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 6] = [
        FailureCategory::HardwareInsufficiency,
        FailureCategory::ConfigFilesMissing,
        FailureCategory::DependencyInstallTimeout,
        FailureCategory::UnitTestsMissing,
        FailureCategory::RuntestTimeout,
        FailureCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureCategory::HardwareInsufficiency => "hardware_insufficiency",
            FailureCategory::ConfigFilesMissing => "config_files_missing",
            FailureCategory::DependencyInstallTimeout => "dependency_install_timeout",
            FailureCategory::UnitTestsMissing => "unit_tests_missing",
            FailureCategory::RuntestTimeout => "runtest_timeout",
            FailureCategory::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub repo_id: String,
    pub dockerfile_built: bool,
    /// The environment launches tests. Implies `dockerfile_built`.
    pub environment_built: bool,
    pub failure_category: Option<FailureCategory>,
}

fn rate(records: &[OutcomeRecord], f: impl Fn(&OutcomeRecord) -> bool) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptySet);
    }
    Ok(records.iter().filter(|r| f(r)).count() as f64 / records.len() as f64)
}

/// Dockerfile generation success rate.
pub fn dgsr(records: &[OutcomeRecord]) -> Result<f64, EvalError> {
    rate(records, |r| r.dockerfile_built)
}

/// Environment build success rate.
pub fn ebsr(records: &[OutcomeRecord]) -> Result<f64, EvalError> {
    rate(records, |r| r.environment_built)
}

/// A rate as a percentage rounded to one decimal, the way tables print it.
pub fn display_percent(rate: f64) -> String {
    format!("{:.1}", rate * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessJudgment {
    pub predicted_type: ErrorType,
    pub gold_type: ErrorType,
    pub description_correct: bool,
    pub fix_correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub description_acc: f64,
    pub fix_acc: f64,
}

/// Harmonic mean, zero when both inputs are zero.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Micro-averaged precision and recall. An `unknown` prediction abstains:
/// it costs recall but not precision.
pub fn process_metrics(judgments: &[ProcessJudgment]) -> Result<ProcessMetrics, EvalError> {
    if judgments.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let n = judgments.len() as f64;
    let predicted = judgments.iter().filter(|j| j.predicted_type != ErrorType::Unknown);
    let tp = predicted.clone().filter(|j| j.predicted_type == j.gold_type).count() as f64;
    let fp = predicted.filter(|j| j.predicted_type != j.gold_type).count() as f64;
    let fn_ = judgments.iter().filter(|j| j.predicted_type != j.gold_type || j.predicted_type == ErrorType::Unknown).count() as f64;
    let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    Ok(ProcessMetrics {
        precision,
        recall,
        f1: f1(precision, recall),
        description_acc: judgments.iter().filter(|j| j.description_correct).count() as f64 / n,
        fix_acc: judgments.iter().filter(|j| j.fix_correct).count() as f64 / n,
    })
}

/// Judges the first failure diagnosis of each annotated fault.
pub fn judge_faults(outcome: &SessionOutcome, faults: &[FaultAnnotation]) -> Vec<ProcessJudgment> {
    let reports: Vec<&DiagnosticReport> = outcome.trajectory.iter().flat_map(|e| e.all_reports()).collect();
    faults
        .iter()
        .map(|fault| {
            let pattern = Regex::new(&fault.command_pattern).ok();
            let fix = Regex::new(&fault.fix_pattern).ok();
            let hit = reports.iter().find(|r| {
                r.verdict == Verdict::Failure && pattern.as_ref().map_or(false, |p| p.is_match(r.command.text()))
            });
            match hit {
                Some(r) => {
                    let desc = r.description.to_lowercase();
                    ProcessJudgment {
                        predicted_type: r.error_type,
                        gold_type: fault.error_type,
                        description_correct: fault.description_keywords.iter().all(|k| desc.contains(&k.to_lowercase())),
                        fix_correct: fix
                            .as_ref()
                            .map_or(false, |f| r.repair_commands.iter().any(|c| f.is_match(c.text()))),
                    }
                }
                None => ProcessJudgment {
                    predicted_type: ErrorType::Unknown,
                    gold_type: fault.error_type,
                    description_correct: false,
                    fix_correct: false,
                },
            }
        })
        .collect()
}

fn is_install(text: &str) -> bool {
    let t = text.trim_start();
    ["pip install", "pip3 install", "python -m pip install", "poetry install", "conda install", "apt-get install", "apt install"]
        .iter()
        .any(|p| t.starts_with(p))
}

/// Maps an unsolved session to a failure category, most specific cause first.
pub fn categorize_failure(outcome: &SessionOutcome, tree: Option<&RepoTree>) -> FailureCategory {
    let records: Vec<_> = outcome.trajectory.iter().flat_map(|e| e.ordered_records()).collect();
    let resource = records.iter().any(|r| {
        let out = r.combined_output();
        r.exit_code == 137 || out.contains("Killed") || out.contains("out of memory") || out.contains("CUDA")
    });
    if resource {
        return FailureCategory::HardwareInsufficiency;
    }
    let prior = outcome.prior.clone().or_else(|| tree.map(extract_prior));
    if let Some(p) = &prior {
        if p.dependency.manager == Manager::Unknown {
            return FailureCategory::ConfigFilesMissing;
        }
        if !p.tests.tests_present {
            return FailureCategory::UnitTestsMissing;
        }
    }
    if let Some(last) = records.iter().rev().find(|r| r.timed_out) {
        if is_install(last.command.text()) {
            return FailureCategory::DependencyInstallTimeout;
        }
        if is_test_launch(last.command.text()) {
            return FailureCategory::RuntestTimeout;
        }
    }
    FailureCategory::Other
}

/// Outcome record for a session and the replay result of its Dockerfile.
pub fn outcome_record(outcome: &SessionOutcome, dockerfile_built: bool, replay_solved: bool, category: Option<FailureCategory>) -> OutcomeRecord {
    let environment_built = dockerfile_built && replay_solved && outcome.status == SessionStatus::Solved;
    OutcomeRecord {
        repo_id: outcome.name.clone(),
        dockerfile_built,
        environment_built,
        failure_category: if environment_built { None } else { category },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub category: FailureCategory,
    pub count: usize,
    pub percent: f64,
}

/// Counts and percentages per category, in table order; empty categories kept.
pub fn failure_table(categories: &[FailureCategory]) -> Vec<FailureRow> {
    let total = categories.len();
    FailureCategory::ALL
        .iter()
        .map(|&c| {
            let count = categories.iter().filter(|&&x| x == c).count();
            let percent = if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 };
            FailureRow { category: c, count, percent }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(built: bool, env: bool) -> OutcomeRecord {
        OutcomeRecord { repo_id: "r".into(), dockerfile_built: built, environment_built: env, failure_category: None }
    }

    #[test]
    fn rates() {
        let v = vec![rec(true, true), rec(true, false), rec(true, false), rec(false, false)];
        assert_eq!(dgsr(&v).unwrap(), 0.75);
        assert_eq!(ebsr(&v).unwrap(), 0.25);
        assert!(matches!(dgsr(&[]), Err(EvalError::EmptySet)));
    }

    #[test]
    fn f1_guard() {
        assert_eq!(f1(0.0, 0.0), 0.0);
        let j = ProcessJudgment {
            predicted_type: ErrorType::Network,
            gold_type: ErrorType::Timeout,
            description_correct: false,
            fix_correct: false,
        };
        let m = process_metrics(&[j]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn abstention_costs_recall_only() {
        let ok = ProcessJudgment {
            predicted_type: ErrorType::Network,
            gold_type: ErrorType::Network,
            description_correct: true,
            fix_correct: true,
        };
        let abstain = ProcessJudgment { predicted_type: ErrorType::Unknown, ..ok.clone() };
        let m = process_metrics(&[ok, abstain]).unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn table_keeps_order() {
        let t = failure_table(&[FailureCategory::Other, FailureCategory::HardwareInsufficiency]);
        assert_eq!(t.len(), 6);
        assert_eq!(t[0].count, 1);
        assert_eq!(t[5].percent, 50.0);
    }
}
