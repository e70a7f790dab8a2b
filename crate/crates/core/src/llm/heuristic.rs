//! A deterministic offline stand-in for a chat model. It reads the same
//! prompts a hosted model would and answers with rule-of-thumb plans and
//! diagnoses, so sessions can be recorded and replayed without network.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;

use super::{estimate_tokens, ChatTurn, LlmError, Provider, Role, Usage};
use crate::expert::EXPERT_SYSTEM_PROMPT;
use crate::sandbox::cmp_versions;

/// Command the main heuristic ends every round with.
pub const VERIFY_COMMAND: &str = "python -m pytest --collect-only -q";
const MAX_STEP_FAILURES: usize = 3;

#[derive(Debug, Default, Clone, Copy)]
pub struct HeuristicProvider;

impl HeuristicProvider {
    pub fn new() -> Self {
        HeuristicProvider
    }
}

impl Provider for HeuristicProvider {
    fn complete(&mut self, messages: &[ChatTurn]) -> Result<(ChatTurn, Usage), LlmError> {
        let first = messages.first().ok_or_else(|| LlmError::InvalidRequest("no messages".into()))?;
        let reply = if first.content == EXPERT_SYSTEM_PROMPT {
            let prompt = messages
                .iter()
                .find(|m| m.role == Role::User)
                .ok_or_else(|| LlmError::InvalidRequest("expert request without a user turn".into()))?;
            expert_reply(&prompt.content)
        } else {
            let text: Vec<&str> = messages.iter().filter(|m| m.role == Role::User).map(|m| m.content.as_str()).collect();
            main_reply(&text.join("\n"))
        };
        let prompt_tokens = messages.iter().map(|m| estimate_tokens(&m.content)).sum();
        let usage = Usage { prompt_tokens, completion_tokens: estimate_tokens(&reply) };
        Ok((ChatTurn::assistant(reply), usage))
    }
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

// ---------------------------------------------------------------- main agent

#[derive(Debug, Default)]
struct PriorView {
    manager: String,
    evidence: Vec<String>,
    needs_install: bool,
}

fn parse_prior(text: &str) -> Option<PriorView> {
    let dep = text.lines().find_map(|l| l.strip_prefix("dependency: "))?;
    let mut fields = dep.split(" | ");
    let manager = fields.next()?.trim().to_string();
    let evidence = fields
        .find_map(|f| f.strip_prefix("evidence: "))
        .map(|e| {
            e.split(", ")
                .map(|s| s.split(" (+").next().unwrap_or("").trim().to_string())
                .filter(|s| !s.is_empty() && s != "-")
                .collect()
        })
        .unwrap_or_default();
    let needs_install = text.lines().any(|l| l.starts_with("importability: needs_install=yes"));
    Some(PriorView { manager, evidence, needs_install })
}

#[derive(Debug, Default)]
struct HistoryView {
    done: Vec<BTreeSet<String>>,
    failures: Vec<(String, String)>,
}

impl HistoryView {
    fn parse(text: &str) -> Self {
        static DONE: OnceLock<Regex> = OnceLock::new();
        static FAIL: OnceLock<Regex> = OnceLock::new();
        let done_re = re(&DONE, r"^\[r\d+\] \$ (.+)$");
        let fail_re = re(&FAIL, r"^\[r\d+\] (?:\(rolled back\) )?failure (\S+) repairs=\d+ :: (.+)$");
        let mut h = HistoryView::default();
        for line in text.lines() {
            if let Some(c) = done_re.captures(line) {
                h.done.push(tokens(&c[1]));
            } else if let Some(c) = fail_re.captures(line) {
                h.failures.push((c[1].to_string(), c[2].trim().to_string()));
            }
        }
        h
    }

    fn succeeded(&self, step: &str) -> bool {
        let want = tokens(step);
        self.done.iter().any(|d| want.is_subset(d))
    }

    fn failures_of(&self, step: &str) -> impl Iterator<Item = &str> + '_ {
        let step = step.to_string();
        self.failures.iter().filter(move |(_, c)| *c == step).map(|(t, _)| t.as_str())
    }

    fn exhausted(&self, step: &str) -> bool {
        self.failures_of(step).count() >= MAX_STEP_FAILURES
    }

    /// A trial is abandoned once its manifest proves absent or it keeps failing.
    fn trial_dead(&self, step: &str) -> bool {
        self.exhausted(step) || self.failures_of(step).any(|t| t == "missing_file")
    }
}

fn tokens(cmd: &str) -> BTreeSet<String> {
    cmd.split_whitespace().map(str::to_string).collect()
}

const TRIALS: &[&[&str]] = &[
    &["pip install -r requirements.txt"],
    &["pip install -e ."],
    &["pip install poetry", "poetry install"],
];

fn planned_steps(prior: Option<&PriorView>, history: &HistoryView) -> (Vec<String>, &'static str) {
    let from_prior: Option<Vec<String>> = prior.and_then(|p| match p.manager.as_str() {
        "poetry" => Some(vec!["pip install poetry".into(), "poetry install".into()]),
        "pip_requirements" => {
            let mut steps: Vec<String> =
                p.evidence.iter().filter(|f| f.ends_with(".txt")).map(|f| format!("pip install -r {f}")).collect();
            if p.needs_install {
                steps.push("pip install -e .".into());
            }
            Some(steps)
        }
        "setuptools" | "pep517_generic" => Some(vec!["pip install -e .".into()]),
        _ => None,
    });
    let (mut steps, thought) = match from_prior {
        Some(steps) => (steps, "Following the dependency manager detected in the repository."),
        None => {
            let trial = TRIALS.iter().find(|t| {
                let last = t[t.len() - 1];
                history.succeeded(last) || !history.trial_dead(last)
            });
            match trial {
                Some(t) => (t.iter().map(|s| s.to_string()).collect(), "Trying the most common install path first."),
                None => (Vec::new(), "No install path worked so far; checking the test suite."),
            }
        }
    };
    steps.push("pip install pytest".into());
    steps.retain(|s| !history.succeeded(s) && !history.exhausted(s));
    steps.push(VERIFY_COMMAND.into());
    (steps, thought)
}

fn main_reply(text: &str) -> String {
    let prior = if text.contains("Repository prior: unavailable") { None } else { parse_prior(text) };
    let history = HistoryView::parse(text);
    let (steps, thought) = planned_steps(prior.as_ref(), &history);
    format!("{thought}\n```bash\n{}\n```\n", steps.join("\n"))
}

// ------------------------------------------------------------------- expert

struct ExpertView<'a> {
    command: &'a str,
    exit: i32,
    timed_out: bool,
    output: String,
    evidence: Vec<(&'a str, i32, String)>,
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let Some(i) = text.find(start) else { return "" };
    let rest = &text[i + start.len()..];
    match rest.find(end) {
        Some(j) => &rest[..j],
        None => rest,
    }
}

fn parse_expert_prompt(text: &str) -> ExpertView<'_> {
    let field = |key: &str| text.lines().find_map(|l| l.strip_prefix(key)).unwrap_or("").trim();
    let stdout = between(text, "--- stdout (tail) ---\n", "--- stderr (tail) ---\n");
    let stderr = between(text, "--- stderr (tail) ---\n", "--- evidence ---\n");
    let ev_text = between(text, "--- evidence ---\n", "--- matching rules ---\n");
    let mut evidence: Vec<(&str, i32, String)> = Vec::new();
    let mut lines = ev_text.lines().peekable();
    while let Some(line) = lines.next() {
        let Some(tool) = line.strip_prefix("$ ") else { continue };
        let exit = lines
            .next_if(|l| l.starts_with("[exit "))
            .and_then(|l| l.trim_start_matches("[exit ").trim_end_matches(']').parse().ok())
            .unwrap_or(0);
        let mut out = String::new();
        while let Some(l) = lines.next_if(|l| !l.starts_with("$ ")) {
            out.push_str(l);
            out.push('\n');
        }
        evidence.push((tool, exit, out));
    }
    ExpertView {
        command: field("Command:"),
        exit: field("Exit code:").parse().unwrap_or(1),
        timed_out: field("Timed out:") == "yes",
        output: format!("{stdout}{stderr}"),
        evidence,
    }
}

struct Diagnosis {
    verdict: &'static str,
    error_type: &'static str,
    description: String,
    repairs: Vec<String>,
    risks: Vec<String>,
}

impl Diagnosis {
    fn failure(error_type: &'static str, description: impl Into<String>, repairs: Vec<String>) -> Self {
        Diagnosis { verdict: "failure", error_type, description: description.into(), repairs, risks: Vec::new() }
    }

    fn render(&self) -> String {
        let mut s = format!("VERDICT: {}\nERROR_TYPE: {}\nDESCRIPTION: {}\n", self.verdict, self.error_type, self.description);
        for r in &self.repairs {
            s.push_str(&format!("REPAIR: {r}\n"));
        }
        for r in &self.risks {
            s.push_str(&format!("RISK: {r}\n"));
        }
        s
    }
}

fn is_install(cmd: &str) -> bool {
    cmd.starts_with("pip install") || cmd.starts_with("pip3 install") || cmd.starts_with("poetry install")
}

/// Import name to distribution name, for the usual mismatches.
fn distribution_for(module: &str) -> String {
    match module {
        "yaml" => "pyyaml",
        "sklearn" => "scikit-learn",
        "cv2" => "opencv-python",
        "PIL" => "pillow",
        "bs4" => "beautifulsoup4",
        "dateutil" => "python-dateutil",
        "attr" => "attrs",
        "toml" => "toml",
        other => other,
    }
    .replace('_', "-")
}

fn with_retry(mut repairs: Vec<String>, cmd: &str) -> Vec<String> {
    if is_install(cmd) {
        repairs.push(cmd.to_string());
    }
    repairs
}

fn available_versions(view: &ExpertView, package: &str) -> Vec<String> {
    let tool = format!("pip index versions {package}");
    view.evidence
        .iter()
        .filter(|(t, exit, _)| *t == tool && *exit == 0)
        .flat_map(|(_, _, out)| out.lines().filter_map(|l| l.strip_prefix("Available versions: ")).map(str::to_string))
        .flat_map(|l| l.split(", ").map(|v| v.trim().to_string()).collect::<Vec<_>>())
        .collect()
}

fn diagnose_failure(view: &ExpertView) -> Diagnosis {
    static CONFLICT: OnceLock<Regex> = OnceLock::new();
    static MODULE: OnceLock<Regex> = OnceLock::new();
    static WRONG_VERSION: OnceLock<Regex> = OnceLock::new();
    static NOT_FOUND: OnceLock<Regex> = OnceLock::new();
    static NO_DIST: OnceLock<Regex> = OnceLock::new();
    let out = view.output.as_str();
    let cmd = view.command;

    if view.timed_out {
        let repairs = match cmd.strip_prefix("pip install ") {
            Some(args) if !cmd.contains("--prefer-binary") => vec![format!("pip install --prefer-binary {args}")],
            _ => Vec::new(),
        };
        let what = if cmd.contains("pytest") { "the test run" } else { "the command" };
        return Diagnosis::failure(
            "timeout",
            format!("{what} exceeded its time limit; source builds are slow, prebuilt wheels may avoid the build"),
            repairs,
        );
    }
    if let Some(c) = re(&CONFLICT, r"(\S+) (\S+) depends on ([A-Za-z0-9._-]+)!=(\S+)").captures(out) {
        let (pkg, ver, dep, bad) = (&c[1], &c[2], &c[3], &c[4]);
        let mut older: Vec<String> = available_versions(view, pkg)
            .into_iter()
            .filter(|v| cmp_versions(v, ver) == std::cmp::Ordering::Less)
            .collect();
        older.sort_by(|a, b| cmp_versions(b, a));
        let description = format!(
            "dependency conflict: {pkg} {ver} excludes {dep} {bad}, which is required; an older {pkg} release avoids the clash"
        );
        let repairs = match older.first() {
            Some(v) => vec![format!("pip install {pkg}=={v}"), cmd.to_string()],
            None => Vec::new(),
        };
        return Diagnosis::failure("dependency_conflict", description, repairs);
    }
    if let Some(c) = re(&WRONG_VERSION, r"cannot import name '\w+' from '(\w+)' \(tests require ([A-Za-z0-9._-]+)==(\S+)\)").captures(out) {
        return Diagnosis::failure(
            "dependency_conflict",
            format!("installed {} has the wrong version for the tests, which need {}", &c[1], &c[3]),
            vec![format!("pip install {}=={}", &c[2], &c[3])],
        );
    }
    if out.contains("Read timed out") || out.contains("ReadTimeoutError") || out.contains("Connection reset") || out.contains("NewConnectionError") {
        return Diagnosis::failure(
            "network",
            "network error while downloading packages; the index timed out",
            vec![format!("{cmd} --retries 10 --timeout 120")],
        );
    }
    if out.contains("[Errno 13]") || out.contains("Permission denied") {
        let repairs = if is_install(cmd) { vec![format!("{cmd} --user")] } else { Vec::new() };
        return Diagnosis::failure("permission", "permission denied writing to the system site-packages", repairs);
    }
    if out.contains("command 'gcc' failed") || out.contains("C compiler") {
        return Diagnosis::failure(
            "toolchain_mismatch",
            "building a native extension needs a C compiler (gcc), which is not installed",
            with_retry(vec!["apt-get install -y build-essential".into()], cmd),
        );
    }
    if out.contains("can't find Rust compiler") {
        return Diagnosis::failure(
            "toolchain_mismatch",
            "building the wheel needs a Rust compiler, which is not installed",
            with_retry(vec!["apt-get install -y cargo".into()], cmd),
        );
    }
    if let Some(c) = re(&MODULE, r"No module named '?([A-Za-z0-9_]+)").captures(out) {
        let module = &c[1];
        if module == "pytest" {
            return Diagnosis::failure("missing_dependency", "pytest is not installed", vec!["pip install pytest".into()]);
        }
        let local = view.evidence.iter().any(|(t, exit, o)| {
            t.starts_with("find ") && *exit == 0 && o.lines().any(|l| l.trim_end_matches('/').ends_with(&format!("/{module}")))
        });
        if local {
            return Diagnosis::failure(
                "missing_dependency",
                format!("module {module} is the repository's own package and it is not installed"),
                with_retry(vec!["pip install -e .".into()], cmd),
            );
        }
        let dist = distribution_for(module);
        return Diagnosis::failure(
            "missing_dependency",
            format!("module {module} is missing; install the {dist} distribution"),
            with_retry(vec![format!("pip install {dist}")], cmd),
        );
    }
    if let Some(c) = re(&NO_DIST, r"No matching distribution found for (\S+)").captures(out) {
        return Diagnosis::failure(
            "missing_dependency",
            format!("no release of {} satisfies the requirement", &c[1]),
            Vec::new(),
        );
    }
    if out.contains("Could not open requirements file") {
        return Diagnosis::failure("missing_file", "the requirements file does not exist in the repository", Vec::new());
    }
    if out.contains("Neither 'setup.py' nor 'pyproject.toml'") || out.contains("could not find a pyproject.toml") {
        return Diagnosis::failure("missing_file", "the project has no setup.py or pyproject.toml to install from", Vec::new());
    }
    if out.contains("file or directory not found") || out.contains("No such file or directory") {
        return Diagnosis::failure("missing_file", "a referenced file or directory does not exist", Vec::new());
    }
    if out.contains("no such option") {
        return Diagnosis::failure("syntax_or_usage", "the command used an option the tool does not support", Vec::new());
    }
    if view.exit == 137 || out.contains("Killed") || out.contains("out of memory") || out.contains("CUDA") {
        return Diagnosis::failure("unknown", "the process was killed by a resource limit (memory or GPU)", Vec::new());
    }
    if let Some(c) = re(&NOT_FOUND, r"sh: 1: (\S+): command not found").captures(out) {
        let tool = &c[1];
        let repairs = match tool {
            "poetry" => with_retry(vec!["pip install poetry".into()], cmd),
            "pytest" => vec!["pip install pytest".into()],
            _ => Vec::new(),
        };
        return Diagnosis::failure("missing_dependency", format!("the {tool} executable is not installed"), repairs);
    }
    Diagnosis::failure("unknown", format!("command exited with status {}", view.exit), Vec::new())
}

fn expert_reply(prompt: &str) -> String {
    let view = parse_expert_prompt(prompt);
    let d = if view.exit == 0 && !view.timed_out {
        let risky = view.output.lines().find(|l| l.contains("DEPRECATION:") || l.to_ascii_lowercase().contains("partial"));
        match risky {
            Some(line) => Diagnosis {
                verdict: "potential_risk",
                error_type: "unknown",
                description: "the command succeeded but printed a warning".into(),
                repairs: Vec::new(),
                risks: vec![format!("warning in output: {}", line.trim().chars().take(120).collect::<String>())],
            },
            None => Diagnosis {
                verdict: "success",
                error_type: "unknown",
                description: "the command completed normally".into(),
                repairs: Vec::new(),
                risks: Vec::new(),
            },
        }
    } else {
        diagnose_failure(&view)
    };
    d.render()
}
