//! Simulator scenario files.
//!
//! A scenario is one JSON document (`schema_version` 1):
//!
//! | field | meaning |
//! |---|---|
//! | `name` | identifier, also used for corpus reports |
//! | `virtual_fs` | path → file content; keys ending in `/` are empty dirs |
//! | `registry` | package → [`PackageSpec`] (available versions, build needs, timing) |
//! | `conflicts` | pairs of `name==version` pins that cannot coexist |
//! | `project` | the repository's own distribution, see [`ProjectSpec`] |
//! | `initial` | packages and facts present in E0 |
//! | `include` | behavior packs appended after `behaviors` |
//! | `behaviors` | ordered pattern → outcome rules, first match wins |
//! | `solved_predicate` | `{ "all": [clause, ...] }` |
//! | `solution` | a command sequence known to solve the scenario |
//! | `faults` | gold annotations for process-level metrics |
//!
//! Clauses are `installed:<pkg>`, `installed:<pkg>==<version>`,
//! `fact:<name>` or `file:<path>`; behavior preconditions may negate them
//! with a leading `!`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SandboxError;

pub const SCHEMA_VERSION: u32 = 1;

/// Named behavior packs and the builtins they route to.
pub const PACKS: &[(&str, &[(&str, &str)])] = &[
    (
        "python",
        &[
            (r"^(pip3?|python3? -m pip)(\s|$)", "pip"),
            (r"^(python3? -m pytest|pytest)(\s|$)", "pytest"),
            (r"^python3?(\s|$)", "python"),
            (r"^poetry(\s|$)", "poetry"),
        ],
    ),
    ("apt", &[(r"^(apt-get|apt)(\s|$)", "apt")]),
    (
        "coreutils",
        &[(
            r"^(cat|ls|find|grep|head|tail|which|echo|pwd|wc|true|env|printenv)(\s|$)",
            "coreutils",
        )],
    ),
];

pub const BUILTINS: &[&str] = &["pip", "pytest", "python", "poetry", "apt", "coreutils"];

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_install_seconds() -> f64 {
    5.0
}

fn default_duration() -> f64 {
    0.1
}

fn default_test_seconds() -> f64 {
    2.0
}

fn default_tests_count() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageSpec {
    pub versions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub import_name: Option<String>,
    #[serde(default = "default_install_seconds")]
    pub install_seconds: f64,
    /// Present when a prebuilt wheel exists; used with `--prefer-binary`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_seconds: Option<f64>,
    /// Facts a source build needs, e.g. `compiler` or `rust`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires_facts: Vec<String>,
    /// Extra stdout emitted on a successful install (deprecations, partial-install notes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub install_warning: Option<String>,
}

impl PackageSpec {
    pub fn import_name(&self, dist: &str) -> String {
        self.import_name.clone().unwrap_or_else(|| dist.replace('-', "_"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub import_name: Option<String>,
    #[serde(default)]
    pub install_requires: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires_facts: Vec<String>,
}

impl ProjectSpec {
    pub fn import_name(&self) -> String {
        self.import_name.clone().unwrap_or_else(|| self.name.replace('-', "_"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    #[serde(default)]
    pub packages: BTreeMap<String, String>,
    #[serde(default)]
    pub facts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub add_facts: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub remove_facts: Vec<String>,
    /// `name==version` pins to install.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub install: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uninstall: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub write_files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default)]
    pub exit_code: i32,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Applied only when the whole command exits 0.
    #[serde(default)]
    pub effects: Effects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub pattern: String,
    /// The behavior does not apply when this regex also matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub when: Vec<String>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub all: Vec<String>,
}

/// Gold annotation for one injected fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultAnnotation {
    /// Regex over the failing command's text.
    pub command_pattern: String,
    pub error_type: crate::expert::ErrorType,
    #[serde(default)]
    pub description_keywords: Vec<String>,
    /// Regex a correct repair command must match.
    pub fix_pattern: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub virtual_fs: BTreeMap<String, String>,
    #[serde(default)]
    pub registry: BTreeMap<String, PackageSpec>,
    #[serde(default)]
    pub conflicts: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<ProjectSpec>,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub include: Vec<String>,
    #[serde(default)]
    pub behaviors: Vec<Behavior>,
    pub solved_predicate: Predicate,
    #[serde(default = "default_test_seconds")]
    pub test_seconds: f64,
    #[serde(default = "default_tests_count")]
    pub tests_count: u32,
    #[serde(default)]
    pub solution: Vec<String>,
    #[serde(default)]
    pub faults: Vec<FaultAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Clause {
    Installed { name: String, version: Option<String> },
    Fact(String),
    File(String),
}

impl Clause {
    pub fn parse(s: &str) -> Result<Clause, String> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| format!("clause `{s}` lacks a kind"))?;
        if rest.is_empty() {
            return Err(format!("clause `{s}` is empty"));
        }
        Ok(match kind {
            "installed" => match rest.split_once("==") {
                Some((n, v)) => Clause::Installed { name: normalize_dist(n), version: Some(v.to_string()) },
                None => Clause::Installed { name: normalize_dist(rest), version: None },
            },
            "fact" => Clause::Fact(rest.to_string()),
            "file" => Clause::File(rest.to_string()),
            other => return Err(format!("unknown clause kind `{other}`")),
        })
    }
}

pub fn normalize_dist(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('_', "-")
}

/// Parses a `when` entry: a clause with optional `!` negation.
pub fn parse_condition(s: &str) -> Result<(bool, Clause), String> {
    match s.strip_prefix('!') {
        Some(rest) => Ok((false, Clause::parse(rest)?)),
        None => Ok((true, Clause::parse(s)?)),
    }
}

impl SimScenario {
    pub fn from_json(text: &str) -> Result<Self, SandboxError> {
        let s: SimScenario =
            serde_json::from_str(text).map_err(|e| SandboxError::ScenarioInvalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SandboxError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SandboxError::ScenarioInvalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            SandboxError::ScenarioInvalid(m) => SandboxError::ScenarioInvalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        let bad = |m: String| Err(SandboxError::ScenarioInvalid(format!("{}: {m}", self.name)));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.name.trim().is_empty() {
            return bad("empty name".into());
        }
        for (name, spec) in &self.registry {
            if spec.versions.is_empty() {
                return bad(format!("package {name} has no versions"));
            }
            if spec.install_seconds < 0.0 || spec.binary_seconds.map_or(false, |s| s < 0.0) {
                return bad(format!("package {name} has a negative duration"));
            }
        }
        for pair in &self.conflicts {
            for pin in pair {
                if !pin.contains("==") {
                    return bad(format!("conflict entry `{pin}` is not a name==version pin"));
                }
            }
        }
        for pack in &self.include {
            if !PACKS.iter().any(|(n, _)| n == pack) {
                return bad(format!("unknown behavior pack `{pack}`"));
            }
        }
        for b in &self.behaviors {
            if let Err(e) = super::cached_regex(&b.pattern) {
                return bad(format!("bad pattern `{}`: {e}", b.pattern));
            }
            if let Some(x) = &b.exclude {
                if let Err(e) = super::cached_regex(x) {
                    return bad(format!("bad exclude `{x}`: {e}"));
                }
            }
            for w in &b.when {
                if let Err(e) = parse_condition(w) {
                    return bad(e);
                }
            }
            if let Some(name) = &b.outcome.builtin {
                if !BUILTINS.contains(&name.as_str()) {
                    return bad(format!("unknown builtin `{name}`"));
                }
            }
        }
        if self.solved_predicate.all.is_empty() {
            return bad("solved_predicate.all is empty".into());
        }
        for c in &self.solved_predicate.all {
            if let Err(e) = Clause::parse(c) {
                return bad(e);
            }
        }
        for f in &self.faults {
            for r in [&f.command_pattern, &f.fix_pattern] {
                if let Err(e) = super::cached_regex(r) {
                    return bad(format!("bad fault regex `{r}`: {e}"));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for k in self.virtual_fs.keys() {
            if k.starts_with('/') || k.split('/').any(|p| p == "..") {
                return bad(format!("virtual_fs path `{k}` must be relative"));
            }
            if !seen.insert(k.trim_end_matches('/')) {
                return bad(format!("duplicate virtual_fs path `{k}`"));
            }
        }
        Ok(())
    }

    pub fn predicate_clauses(&self) -> Vec<Clause> {
        self.solved_predicate.all.iter().filter_map(|c| Clause::parse(c).ok()).collect()
    }

    pub fn repo_tree(&self) -> crate::prior::RepoTree {
        crate::prior::RepoTree::from_files(self.virtual_fs.iter().map(|(k, v)| (k.as_str(), v.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"name":"m","solved_predicate":{"all":["fact:never"]}}"#
    }

    #[test]
    fn loads_minimal() {
        let s = SimScenario::from_json(minimal()).unwrap();
        assert!(s.behaviors.is_empty());
        assert_eq!(s.predicate_clauses(), vec![Clause::Fact("never".into())]);
    }

    #[test]
    fn rejects_bad_documents() {
        for doc in [
            r#"{"name":"m","solved_predicate":{"all":[]}}"#,
            r#"{"name":"m","solved_predicate":{"all":["nonsense"]}}"#,
            r#"{"name":"m","include":["nope"],"solved_predicate":{"all":["fact:a"]}}"#,
            r#"{"name":"m","behaviors":[{"pattern":"(","outcome":{}}],"solved_predicate":{"all":["fact:a"]}}"#,
            r#"{"name":"m","registry":{"a":{"versions":[]}},"solved_predicate":{"all":["fact:a"]}}"#,
            r#"{"name":"m","virtual_fs":{"../x":""},"solved_predicate":{"all":["fact:a"]}}"#,
            r#"{"name":"m","schema_version":9,"solved_predicate":{"all":["fact:a"]}}"#,
            r#"not json"#,
        ] {
            assert!(matches!(SimScenario::from_json(doc), Err(SandboxError::ScenarioInvalid(_))), "{doc}");
        }
    }

    #[test]
    fn missing_file_is_invalid() {
        let err = SimScenario::load(Path::new("/definitely/not/here.json")).unwrap_err();
        assert!(matches!(err, SandboxError::ScenarioInvalid(_)));
    }

    #[test]
    fn clause_parsing() {
        assert_eq!(
            Clause::parse("installed:Pkg_B==1.2").unwrap(),
            Clause::Installed { name: "pkg-b".into(), version: Some("1.2".into()) }
        );
        assert_eq!(parse_condition("!fact:x").unwrap(), (false, Clause::Fact("x".into())));
        assert!(Clause::parse("fact:").is_err());
    }
}
