//! Prioritized trigger → template rules and their online evolution.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::{DiagnosticReport, ErrorType, Verdict};

pub const DEFAULT_CAP: usize = 32;
/// Priority of a rule synthesized from a successful model repair.
pub const LEARNED_PRIORITY: Priority = Priority(500);
const SUCCESS_DELTA: i32 = 100;
const FAILURE_DELTA: i32 = -200;
const RISK_DELTA: i32 = 100;

const SEED_RULES: &str = include_str!("seed_rules.toml");

/// A priority in [0, 1], stored exactly in thousandths so repeated
/// updates never drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Priority(u16);

impl Priority {
    pub const MIN: Priority = Priority(0);
    pub const MAX: Priority = Priority(1000);

    pub const fn from_milli(m: u16) -> Option<Priority> {
        if m <= 1000 {
            Some(Priority(m))
        } else {
            None
        }
    }

    pub fn from_f64(p: f64) -> Option<Priority> {
        if !(0.0..=1.0).contains(&p) {
            return None;
        }
        Some(Priority((p * 1000.0).round() as u16))
    }

    pub fn milli(self) -> u16 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Adds `delta` thousandths, clamped to [0, 1].
    pub fn shifted(self, delta: i32) -> Priority {
        Priority((self.0 as i32 + delta).clamp(0, 1000) as u16)
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.value())
    }
}

impl Serialize for Priority {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Priority {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let p = f64::deserialize(d)?;
        Priority::from_f64(p).ok_or_else(|| serde::de::Error::custom(format!("priority {p} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleCategory {
    RepairSuggestion,
    ToolCreation,
    RiskAssessment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMatch {
    Zero,
    Nonzero,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOrigin {
    Seed,
    Learned,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    /// Regex over the command text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit: Option<ExitMatch>,
    /// Regex over stdout+stderr; named groups become template variables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<ErrorType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub category: RuleCategory,
    pub trigger: Trigger,
    /// Command template (repair, tool) or note (risk). `{command}` is the
    /// triggering command; other `{name}`s come from output captures.
    pub effect: String,
    pub priority: Priority,
    #[serde(default = "seed_origin")]
    pub origin: RuleOrigin,
    /// Creation order; eviction breaks priority ties by the oldest.
    #[serde(default)]
    pub seq: u64,
}

fn seed_origin() -> RuleOrigin {
    RuleOrigin::Seed
}

/// What a trigger is matched against.
#[derive(Debug, Clone, Copy)]
pub struct MatchInput<'a> {
    pub command: &'a str,
    pub exit_code: i32,
    pub timed_out: bool,
    pub output: &'a str,
    pub error_type: Option<ErrorType>,
}

#[derive(Debug)]
struct Matcher {
    command: Option<Regex>,
    output: Option<Regex>,
}

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("rule file: {0}")]
    Parse(String),
    #[error("rule {id}: bad regex: {message}")]
    Regex { id: String, message: String },
    #[error("duplicate rule id {0}")]
    DuplicateId(String),
    #[error("{count} rules exceed the cap of {cap}")]
    OverCap { count: usize, cap: usize },
    #[error("cap must be at least 1")]
    ZeroCap,
}

/// Feedback from the execution that followed a diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Feedback {
    /// The report's `repair`-th repair command executed successfully.
    RepairSucceeded { repair: usize },
    RepairFailed { repair: usize },
    RiskConfirmed,
    RiskUnfounded,
    None,
}

#[derive(Deserialize)]
struct RuleFile {
    #[serde(default)]
    cap: Option<usize>,
    rules: Vec<Rule>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleSet {
    rules: Vec<Rule>,
    cap: usize,
    revision: u64,
    next_seq: u64,
    #[serde(skip)]
    matchers: BTreeMap<String, Arc<Matcher>>,
}

impl PartialEq for RuleSet {
    fn eq(&self, other: &Self) -> bool {
        self.rules == other.rules && self.cap == other.cap && self.revision == other.revision && self.next_seq == other.next_seq
    }
}

fn compile(rule: &Rule) -> Result<Matcher, RuleError> {
    let re = |p: &Option<String>| -> Result<Option<Regex>, RuleError> {
        p.as_deref()
            .map(Regex::new)
            .transpose()
            .map_err(|e| RuleError::Regex { id: rule.id.clone(), message: e.to_string() })
    };
    Ok(Matcher { command: re(&rule.trigger.command)?, output: re(&rule.trigger.output)? })
}

/// Fills `{name}` placeholders; `None` if any placeholder has no value.
pub fn render_template(template: &str, vars: &BTreeMap<String, String>) -> Option<String> {
    let mut out = String::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let end = after.find('}')?;
        out.push_str(vars.get(&after[..end])?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Some(out)
}

impl RuleSet {
    pub fn new(mut rules: Vec<Rule>, cap: usize) -> Result<Self, RuleError> {
        if cap == 0 {
            return Err(RuleError::ZeroCap);
        }
        if rules.len() > cap {
            return Err(RuleError::OverCap { count: rules.len(), cap });
        }
        let mut matchers = BTreeMap::new();
        for (i, r) in rules.iter_mut().enumerate() {
            if r.seq == 0 {
                r.seq = i as u64;
            }
            if matchers.insert(r.id.clone(), Arc::new(compile(r)?)).is_some() {
                return Err(RuleError::DuplicateId(r.id.clone()));
            }
        }
        let next_seq = rules.iter().map(|r| r.seq + 1).max().unwrap_or(0);
        Ok(RuleSet { rules, cap, revision: 0, next_seq, matchers })
    }

    pub fn from_toml(text: &str) -> Result<Self, RuleError> {
        let file: RuleFile = toml::from_str(text).map_err(|e| RuleError::Parse(e.to_string()))?;
        Self::new(file.rules, file.cap.unwrap_or(DEFAULT_CAP))
    }

    /// The built-in cold-start rules.
    pub fn seed() -> Self {
        Self::from_toml(SEED_RULES).expect("seed rules are valid")
    }

    pub fn with_cap(mut self, cap: usize) -> Result<Self, RuleError> {
        if cap == 0 {
            return Err(RuleError::ZeroCap);
        }
        if self.rules.len() > cap {
            return Err(RuleError::OverCap { count: self.rules.len(), cap });
        }
        self.cap = cap;
        Ok(self)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    fn matcher(&self, rule: &Rule) -> Arc<Matcher> {
        match self.matchers.get(&rule.id) {
            Some(m) => Arc::clone(m),
            // deserialized sets have no cached matchers
            None => Arc::new(compile(rule).unwrap_or(Matcher { command: None, output: Some(Regex::new("$^").unwrap()) })),
        }
    }

    /// Tests one rule; returns its template variables on a match.
    pub fn match_rule(&self, rule: &Rule, input: &MatchInput) -> Option<BTreeMap<String, String>> {
        let t = &rule.trigger;
        match t.exit {
            Some(ExitMatch::Zero) if input.exit_code != 0 || input.timed_out => return None,
            Some(ExitMatch::Nonzero) if input.exit_code == 0 => return None,
            Some(ExitMatch::Timeout) if !input.timed_out => return None,
            _ => {}
        }
        if let Some(want) = t.error_type {
            if input.error_type != Some(want) {
                return None;
            }
        }
        let m = self.matcher(rule);
        let mut vars = BTreeMap::new();
        for (re, text) in [(&m.command, input.command), (&m.output, input.output)] {
            if let Some(re) = re {
                let caps = re.captures(text)?;
                for name in re.capture_names().flatten() {
                    if let Some(v) = caps.name(name) {
                        vars.insert(name.to_string(), v.as_str().to_string());
                    }
                }
            }
        }
        vars.insert("command".into(), input.command.to_string());
        Some(vars)
    }

    /// Matching rules of one category at or above `min`, highest priority first.
    pub fn matching(
        &self,
        category: RuleCategory,
        input: &MatchInput,
        min: Priority,
    ) -> Vec<(&Rule, BTreeMap<String, String>)> {
        let mut hits: Vec<_> = self
            .rules
            .iter()
            .filter(|r| r.category == category && r.priority >= min)
            .filter_map(|r| self.match_rule(r, input).map(|v| (r, v)))
            .collect();
        hits.sort_by(|a, b| b.0.priority.cmp(&a.0.priority).then(a.0.seq.cmp(&b.0.seq)));
        hits
    }

    fn shift(&mut self, id: &str, delta: i32) -> bool {
        match self.rules.iter_mut().find(|r| r.id == id) {
            Some(r) => {
                let p = r.priority.shifted(delta);
                let changed = p != r.priority;
                r.priority = p;
                changed
            }
            None => false,
        }
    }

    /// Adds a rule, evicting the lowest-priority (then oldest) rule when over cap.
    /// Returns whether the set changed.
    pub fn insert(&mut self, mut rule: Rule) -> Result<bool, RuleError> {
        if self.get(&rule.id).is_some() {
            return Err(RuleError::DuplicateId(rule.id));
        }
        rule.seq = self.next_seq;
        self.next_seq += 1;
        let matcher = Arc::new(compile(&rule)?);
        let id = rule.id.clone();
        self.matchers.insert(id.clone(), matcher);
        self.rules.push(rule);
        if self.rules.len() > self.cap {
            let victim = self
                .rules
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.priority.cmp(&b.priority).then(a.seq.cmp(&b.seq)))
                .map(|(i, _)| i)
                .expect("non-empty");
            let gone = self.rules.remove(victim);
            self.matchers.remove(&gone.id);
            if gone.id == id {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn covers(&self, report: &DiagnosticReport, repair: &str) -> bool {
        let output = report.output_tail.as_deref().unwrap_or("");
        let input = MatchInput {
            command: report.command.text(),
            exit_code: report.exit_code,
            timed_out: report.timed_out,
            output,
            error_type: Some(report.error_type),
        };
        self.rules.iter().filter(|r| r.category == RuleCategory::RepairSuggestion).any(|r| {
            self.match_rule(r, &input).and_then(|v| render_template(&r.effect, &v)).as_deref() == Some(repair)
        })
    }
}

/// Generalizes a key error line into a trigger regex: quoted paths and
/// hex addresses become wildcards, everything else stays literal.
pub fn signature_regex(line: &str) -> String {
    let quoted_path = Regex::new(r"'[^']*/[^']*'").unwrap();
    let mut out = String::new();
    let mut last = 0;
    for m in quoted_path.find_iter(line) {
        out.push_str(&regex::escape(&line[last..m.start()]));
        out.push_str("'[^']*'");
        last = m.end();
    }
    out.push_str(&regex::escape(&line[last..]));
    Regex::new(r"0x[0-9a-f]+").unwrap().replace_all(&out, "0x[0-9a-f]+").into_owned()
}

/// Applies one feedback signal. Priorities move by fixed steps and stay in
/// [0, 1]; the revision increases by one iff the set changed.
pub fn evolve_rules(ruleset: &mut RuleSet, report: &DiagnosticReport, feedback: Feedback) -> bool {
    let changed = match feedback {
        Feedback::None => false,
        Feedback::RepairSucceeded { repair } => {
            let mut changed = false;
            for id in report.tool_rules.clone() {
                changed |= ruleset.shift(&id, SUCCESS_DELTA);
            }
            match report.repair_sources.get(repair).cloned().flatten() {
                Some(id) => changed |= ruleset.shift(&id, SUCCESS_DELTA),
                None => {
                    if let (Some(cmd), Some(sig)) = (report.repair_commands.get(repair), report.signature.as_deref()) {
                        if !ruleset.covers(report, cmd.text()) {
                            let effect = match cmd.text().strip_prefix(report.command.text()) {
                                Some(rest) => format!("{{command}}{rest}"),
                                None => cmd.text().replace('{', "(").replace('}', ")"),
                            };
                            let rule = Rule {
                                id: format!("learned-{}", ruleset.next_seq),
                                category: RuleCategory::RepairSuggestion,
                                trigger: Trigger {
                                    command: None,
                                    exit: Some(if report.timed_out { ExitMatch::Timeout } else { ExitMatch::Nonzero }),
                                    output: Some(signature_regex(sig)),
                                    error_type: Some(report.error_type),
                                },
                                effect,
                                priority: LEARNED_PRIORITY,
                                origin: RuleOrigin::Learned,
                                seq: 0,
                            };
                            changed |= ruleset.insert(rule).unwrap_or(false);
                        }
                    }
                }
            }
            changed
        }
        Feedback::RepairFailed { repair } => match report.repair_sources.get(repair).cloned().flatten() {
            Some(id) => ruleset.shift(&id, FAILURE_DELTA),
            None => false,
        },
        Feedback::RiskConfirmed | Feedback::RiskUnfounded => {
            let delta = if feedback == Feedback::RiskConfirmed { RISK_DELTA } else { -RISK_DELTA };
            let mut changed = false;
            if report.verdict == Verdict::PotentialRisk {
                for id in report.risk_rules.clone() {
                    changed |= ruleset.shift(&id, delta);
                }
            }
            changed
        }
    };
    if changed {
        ruleset.revision += 1;
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(id: &str, p: u16) -> Rule {
        Rule {
            id: id.into(),
            category: RuleCategory::RepairSuggestion,
            trigger: Trigger { output: Some("x".into()), ..Trigger::default() },
            effect: "echo".into(),
            priority: Priority(p),
            origin: RuleOrigin::Seed,
            seq: 0,
        }
    }

    #[test]
    fn seed_rules_load() {
        let s = RuleSet::seed();
        assert!(s.rules().len() >= 10);
        assert!(s.rules().len() <= s.cap());
        for c in [RuleCategory::RepairSuggestion, RuleCategory::ToolCreation, RuleCategory::RiskAssessment] {
            assert!(s.rules().iter().any(|r| r.category == c), "{c:?}");
        }
        assert_eq!(s.revision(), 0);
    }

    #[test]
    fn priority_is_exact() {
        let mut p = Priority::from_f64(0.5).unwrap();
        p = p.shifted(SUCCESS_DELTA);
        assert_eq!(p.value(), 0.6);
        assert_eq!(Priority::from_f64(0.1).unwrap().shifted(FAILURE_DELTA), Priority::MIN);
        assert_eq!(Priority::MAX.shifted(SUCCESS_DELTA), Priority::MAX);
        assert!(Priority::from_f64(1.5).is_none());
    }

    #[test]
    fn templates() {
        let mut v = BTreeMap::new();
        v.insert("pkg".to_string(), "numpy".to_string());
        assert_eq!(render_template("pip index versions {pkg}", &v).as_deref(), Some("pip index versions numpy"));
        assert_eq!(render_template("{missing}", &v), None);
    }

    #[test]
    fn insert_evicts_lowest_then_oldest() {
        let mut s = RuleSet::new(vec![rule("a", 300), rule("b", 300)], 2).unwrap();
        assert!(s.insert(rule("c", 500)).unwrap());
        let ids: Vec<_> = s.rules().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["b", "c"]);
        // a new rule that is itself the lowest leaves the set unchanged
        assert!(!s.insert(rule("d", 100)).unwrap());
        assert_eq!(s.rules().len(), 2);
    }

    #[test]
    fn bad_rules_rejected() {
        assert!(matches!(RuleSet::new(vec![rule("a", 1), rule("a", 2)], 4), Err(RuleError::DuplicateId(_))));
        assert!(matches!(RuleSet::new(vec![rule("a", 1), rule("b", 2)], 1), Err(RuleError::OverCap { .. })));
        let mut r = rule("a", 1);
        r.trigger.output = Some("(".into());
        assert!(matches!(RuleSet::new(vec![r], 4), Err(RuleError::Regex { .. })));
        assert!(RuleSet::from_toml("rules = [{ id = 'x' }]").is_err());
    }

    #[test]
    fn signature_generalizes_paths_only() {
        let sig = signature_regex("Permission denied: '/usr/lib/x' for 'yaml'");
        let re = Regex::new(&sig).unwrap();
        assert!(re.is_match("Permission denied: '/opt/other' for 'yaml'"));
        assert!(!re.is_match("Permission denied: '/opt/other' for 'toml'"));
    }
}
