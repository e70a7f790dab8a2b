//! Deterministic simulated environment.
//!
//! State is a virtual filesystem, a set of installed `(package, version)`
//! pairs and a set of boolean facts (`compiler`, `project_installed`, ...).
//! Every top-level command is atomic: its effects are committed only when
//! the whole command exits 0 within its timeout.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use regex::Regex;

use super::scenario::{normalize_dist, parse_condition, Clause, Effects, Outcome, PackageSpec, ProjectSpec, PACKS};
use super::shell::{split_links, words, Chain};
use super::{cached_regex, BackendKind, EnvironmentState, ExecutionRecord, Sandbox, SandboxError, SimScenario, SnapshotId};
use crate::command::AtomicCommand;
use crate::prior::RepoTree;

const SITE_PACKAGES: &str = "/usr/local/lib/python3.11/site-packages";

const STDLIB: &[&str] = &[
    "os", "sys", "re", "json", "math", "time", "typing", "collections", "itertools", "functools",
    "pathlib", "subprocess", "unittest", "logging", "datetime", "random", "io", "abc", "enum",
    "dataclasses", "shutil", "tempfile", "string", "textwrap", "argparse", "copy", "pickle",
    "platform", "importlib", "contextlib", "warnings", "sqlite3", "csv", "hashlib", "base64",
    "asyncio", "threading", "multiprocessing", "socket", "struct", "traceback", "inspect",
    "site", "sysconfig", "venv", "ensurepip", "pkgutil", "zipfile", "tarfile", "glob", "fnmatch",
];

#[derive(Debug, Clone, PartialEq, Eq)]
struct SimState {
    files: BTreeMap<String, String>,
    dirs: BTreeSet<String>,
    packages: BTreeMap<String, String>,
    facts: BTreeSet<String>,
}

impl SimState {
    fn holds(&self, clause: &Clause) -> bool {
        match clause {
            Clause::Installed { name, version } => match (self.packages.get(name), version) {
                (Some(_), None) => true,
                (Some(v), Some(want)) => v == want,
                (None, _) => false,
            },
            Clause::Fact(f) => self.facts.contains(f),
            Clause::File(p) => self.files.contains_key(p.trim_start_matches("./")),
        }
    }

    fn apply(&mut self, effects: &Effects) {
        for f in &effects.add_facts {
            self.facts.insert(f.clone());
        }
        for f in &effects.remove_facts {
            self.facts.remove(f);
        }
        for pin in &effects.install {
            if let Some((n, v)) = pin.split_once("==") {
                self.packages.insert(normalize_dist(n), v.trim().to_string());
            }
        }
        for n in &effects.uninstall {
            self.packages.remove(&normalize_dist(n));
        }
        for (p, c) in &effects.write_files {
            self.files.insert(p.clone(), c.clone());
        }
    }

    /// Every path in the tree: files, declared dirs and implied parents.
    fn all_paths(&self) -> BTreeMap<String, bool> {
        let mut out = BTreeMap::new();
        for d in &self.dirs {
            out.insert(d.clone(), true);
        }
        for f in self.files.keys() {
            let parts: Vec<&str> = f.split('/').collect();
            for i in 1..parts.len() {
                out.insert(parts[..i].join("/"), true);
            }
            out.insert(f.clone(), false);
        }
        out
    }
}

struct CompiledBehavior {
    pattern: Regex,
    exclude: Option<Regex>,
    when: Vec<(bool, Clause)>,
    outcome: Outcome,
}

#[derive(Debug, Default, Clone)]
struct Run {
    exit: i32,
    stdout: String,
    stderr: String,
    duration: f64,
}

impl Run {
    fn ok(stdout: impl Into<String>, duration: f64) -> Run {
        Run { exit: 0, stdout: stdout.into(), stderr: String::new(), duration }
    }

    fn fail(exit: i32, stderr: impl Into<String>, duration: f64) -> Run {
        Run { exit, stdout: String::new(), stderr: stderr.into(), duration }
    }
}

pub struct SimSandbox {
    scenario: Arc<SimScenario>,
    behaviors: Vec<CompiledBehavior>,
    state: SimState,
    snapshots: BTreeMap<String, SimState>,
    next_snapshot: u64,
    round: u32,
    closed: bool,
}

impl SimSandbox {
    /// E0 for a scenario. The initial state is a pure function of the scenario.
    pub fn new(scenario: SimScenario) -> Result<Self, SandboxError> {
        scenario.validate()?;
        let mut behaviors = Vec::new();
        let compile = |p: &str| cached_regex(p).map_err(|e| SandboxError::ScenarioInvalid(e.to_string()));
        for b in &scenario.behaviors {
            behaviors.push(CompiledBehavior {
                pattern: compile(&b.pattern)?,
                exclude: b.exclude.as_deref().map(compile).transpose()?,
                when: b.when.iter().map(|w| parse_condition(w)).collect::<Result<_, _>>().map_err(SandboxError::ScenarioInvalid)?,
                outcome: b.outcome.clone(),
            });
        }
        for pack in &scenario.include {
            let (_, routes) = PACKS.iter().find(|(n, _)| n == pack).expect("validated");
            for (pattern, builtin) in routes.iter() {
                behaviors.push(CompiledBehavior {
                    pattern: compile(pattern)?,
                    exclude: None,
                    when: Vec::new(),
                    outcome: Outcome {
                        builtin: Some(builtin.to_string()),
                        exit_code: 0,
                        stdout: String::new(),
                        stderr: String::new(),
                        duration: 0.0,
                        effects: Effects::default(),
                    },
                });
            }
        }
        let mut files = BTreeMap::new();
        let mut dirs = BTreeSet::new();
        for (k, v) in &scenario.virtual_fs {
            if k.ends_with('/') {
                dirs.insert(k.trim_end_matches('/').to_string());
            } else {
                files.insert(k.clone(), v.clone());
            }
        }
        let state = SimState {
            files,
            dirs,
            packages: scenario.initial.packages.iter().map(|(k, v)| (normalize_dist(k), v.clone())).collect(),
            facts: scenario.initial.facts.iter().cloned().collect(),
        };
        Ok(SimSandbox {
            scenario: Arc::new(scenario),
            behaviors,
            state,
            snapshots: BTreeMap::new(),
            next_snapshot: 0,
            round: 0,
            closed: false,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, SandboxError> {
        Self::new(SimScenario::load(path)?)
    }

    pub fn scenario(&self) -> &SimScenario {
        &self.scenario
    }

    /// Installed packages, for tests and state dumps.
    pub fn installed(&self) -> &BTreeMap<String, String> {
        &self.state.packages
    }

    pub fn facts(&self) -> &BTreeSet<String> {
        &self.state.facts
    }

    fn run_text(&self, work: &mut SimState, text: &str) -> Run {
        let mut total = Run::default();
        let mut last_exit = 0;
        for link in split_links(text) {
            match link.chain {
                Chain::And if last_exit != 0 => continue,
                Chain::Or if last_exit == 0 => continue,
                _ => {}
            }
            let mut stdin: Option<String> = None;
            let mut exit = 0;
            for stage in &link.stages {
                let run = self.run_simple(work, stage, stdin.as_deref());
                total.stderr.push_str(&run.stderr);
                total.duration += run.duration;
                exit = run.exit;
                stdin = Some(run.stdout);
            }
            total.stdout.push_str(stdin.as_deref().unwrap_or(""));
            last_exit = exit;
        }
        total.exit = last_exit;
        total
    }

    fn run_simple(&self, work: &mut SimState, text: &str, stdin: Option<&str>) -> Run {
        let text = text.trim();
        if text.is_empty() {
            return Run::ok("", 0.0);
        }
        for b in &self.behaviors {
            if !b.pattern.is_match(text) {
                continue;
            }
            if b.exclude.as_ref().map_or(false, |x| x.is_match(text)) {
                continue;
            }
            if !b.when.iter().all(|(want, clause)| work.holds(clause) == *want) {
                continue;
            }
            return match &b.outcome.builtin {
                Some(name) => self.builtin(name, work, text, stdin),
                None => {
                    let o = &b.outcome;
                    if o.exit_code == 0 {
                        work.apply(&o.effects);
                    }
                    Run { exit: o.exit_code, stdout: o.stdout.clone(), stderr: o.stderr.clone(), duration: o.duration }
                }
            };
        }
        let head = words(text).into_iter().next().unwrap_or_default();
        Run::fail(127, format!("sh: 1: {head}: command not found\n"), 0.01)
    }

    fn builtin(&self, name: &str, work: &mut SimState, text: &str, stdin: Option<&str>) -> Run {
        let argv = words(text);
        match name {
            "pip" => {
                let skip = if argv.first().map_or(false, |a| a.starts_with("python")) { 3 } else { 1 };
                self.pip(work, argv.get(skip..).unwrap_or(&[]))
            }
            "pytest" => self.pytest(work, argv.first().map_or(false, |a| a.starts_with("python"))),
            "python" => self.python(work, &argv[1..]),
            "poetry" => self.poetry(work, &argv[1..], stdin),
            "apt" => apt(work, &argv[1..]),
            _ => self.coreutils(work, &argv, stdin),
        }
    }

    fn project(&self) -> ProjectSpec {
        self.scenario.project.clone().unwrap_or(ProjectSpec {
            name: "project".into(),
            import_name: None,
            install_requires: Vec::new(),
            requires_facts: Vec::new(),
        })
    }

    fn package(&self, name: &str) -> Option<&PackageSpec> {
        self.scenario.registry.iter().find(|(k, _)| normalize_dist(k) == name).map(|(_, v)| v)
    }

    fn importable(&self, work: &SimState, module: &str) -> bool {
        if STDLIB.contains(&module) {
            return true;
        }
        for (dist, ver) in &work.packages {
            let _ = ver;
            let import = self.package(dist).map(|p| p.import_name(dist)).unwrap_or_else(|| dist.replace('-', "_"));
            if import == module {
                return true;
            }
        }
        let project = self.project();
        if project.import_name() == module && work.facts.contains("project_installed") {
            return true;
        }
        // flat packages import from the working directory
        work.files.contains_key(&format!("{module}/__init__.py")) || work.files.contains_key(&format!("{module}.py"))
    }

    fn pip(&self, work: &mut SimState, args: &[String]) -> Run {
        let sub = args.first().map(String::as_str).unwrap_or("");
        let rest = args.get(1..).unwrap_or(&[]);
        match sub {
            "install" => self.pip_install(work, rest),
            "uninstall" => {
                let mut out = String::new();
                for n in rest.iter().filter(|a| !a.starts_with('-')) {
                    let n = normalize_dist(n);
                    match work.packages.remove(&n) {
                        Some(v) => out.push_str(&format!("Found existing installation: {n} {v}\nSuccessfully uninstalled {n}-{v}\n")),
                        None => out.push_str(&format!("WARNING: Skipping {n} as it is not installed.\n")),
                    }
                }
                Run::ok(out, 1.0)
            }
            "show" => {
                let mut out = String::new();
                let mut missing = Vec::new();
                for n in rest.iter().filter(|a| !a.starts_with('-')) {
                    let n = normalize_dist(n);
                    match work.packages.get(&n) {
                        Some(v) => {
                            if !out.is_empty() {
                                out.push_str("---\n");
                            }
                            out.push_str(&format!("Name: {n}\nVersion: {v}\nLocation: {SITE_PACKAGES}\n"));
                        }
                        None => missing.push(n),
                    }
                }
                if missing.is_empty() {
                    Run::ok(out, 0.5)
                } else {
                    Run { exit: 1, stdout: out, stderr: format!("WARNING: Package(s) not found: {}\n", missing.join(", ")), duration: 0.5 }
                }
            }
            "list" => {
                let mut out = String::from("Package    Version\n---------- -------\n");
                for (n, v) in &work.packages {
                    out.push_str(&format!("{n} {v}\n"));
                }
                Run::ok(out, 0.5)
            }
            "freeze" => Run::ok(work.packages.iter().map(|(n, v)| format!("{n}=={v}\n")).collect::<String>(), 0.5),
            "index" if rest.first().map(String::as_str) == Some("versions") => {
                let Some(name) = rest.get(1).map(|n| normalize_dist(n)) else {
                    return Run::fail(1, "ERROR: You must give a package name\n", 0.2);
                };
                match self.package(&name) {
                    Some(spec) => {
                        let mut versions = spec.versions.clone();
                        versions.sort_by(|a, b| cmp_versions(b, a));
                        let mut out = format!("{name} ({})\nAvailable versions: {}\n", versions[0], versions.join(", "));
                        if let Some(v) = work.packages.get(&name) {
                            out.push_str(&format!("  INSTALLED: {v}\n  LATEST:    {}\n", versions[0]));
                        }
                        Run::ok(out, 1.0)
                    }
                    None => Run::fail(1, format!("ERROR: No matching distribution found for {name}\n"), 1.0),
                }
            }
            "config" => match rest.first().map(String::as_str) {
                Some("set") if rest.len() >= 3 => {
                    work.facts.insert(format!("pip_config:{}", rest[1]));
                    Run::ok("Writing to /root/.config/pip/pip.conf\n", 0.2)
                }
                Some("list") => Run::ok(
                    work.facts.iter().filter_map(|f| f.strip_prefix("pip_config:")).map(|k| format!("{k}='set'\n")).collect::<String>(),
                    0.2,
                ),
                _ => Run::fail(1, "ERROR: Need an action (debug, edit, get, list, set, unset) to perform.\n", 0.2),
            },
            "check" => Run::ok("No broken requirements found.\n", 0.5),
            "--version" | "-V" => Run::ok(format!("pip 24.0 from {SITE_PACKAGES}/pip (python 3.11)\n"), 0.2),
            "" => Run::fail(1, "Usage:\n  pip <command> [options]\n", 0.2),
            other => Run::fail(1, format!("ERROR: unknown command \"{other}\"\n"), 0.2),
        }
    }

    fn pip_install(&self, work: &mut SimState, args: &[String]) -> Run {
        const SWITCHES: &[&str] = &[
            "-U", "--upgrade", "--user", "--prefer-binary", "--no-cache-dir", "-q", "--quiet", "-v",
            "--verbose", "--no-input", "--disable-pip-version-check", "--no-build-isolation",
            "--force-reinstall", "--pre", "--no-warn-script-location",
        ];
        const VALUED: &[&str] = &[
            "--retries", "--timeout", "--index-url", "-i", "--extra-index-url", "-c", "--constraint",
            "--only-binary", "--no-binary", "--trusted-host", "--default-timeout",
        ];
        let mut reqs: Vec<String> = Vec::new();
        let mut project = false;
        let mut upgrade = false;
        let mut prefer_binary = false;
        let mut i = 0;
        while i < args.len() {
            let a = args[i].as_str();
            let (flag, inline) = match a.split_once('=') {
                Some((f, v)) if f.starts_with("--") => (f, Some(v)),
                _ => (a, None),
            };
            match flag {
                "-r" | "--requirement" => {
                    let Some(path) = args.get(i + 1) else {
                        return Run::fail(2, "ERROR: -r option requires 1 argument\n", 0.2);
                    };
                    match self.read_requirements(work, path, 0) {
                        Ok((r, p)) => {
                            reqs.extend(r);
                            project |= p;
                        }
                        Err(run) => return run,
                    }
                    i += 2;
                    continue;
                }
                "-e" | "--editable" => {
                    match args.get(i + 1).map(String::as_str) {
                        Some(".") | Some("./") => project = true,
                        Some(other) => reqs.push(other.to_string()),
                        None => return Run::fail(2, "ERROR: -e option requires 1 argument\n", 0.2),
                    }
                    i += 2;
                    continue;
                }
                f if SWITCHES.contains(&f) => {
                    upgrade |= f == "-U" || f == "--upgrade";
                    prefer_binary |= f == "--prefer-binary";
                }
                f if VALUED.contains(&f) => {
                    prefer_binary |= f == "--only-binary";
                    if inline.is_none() {
                        i += 1;
                    }
                }
                f if f.starts_with('-') => {
                    return Run::fail(2, format!("\nUsage:\n  pip install [options] <requirement specifier> ...\n\nno such option: {f}\n"), 0.2);
                }
                "." | "./" => project = true,
                _ => reqs.push(a.to_string()),
            }
            i += 1;
        }
        if reqs.is_empty() && !project {
            return Run::fail(1, "ERROR: You must give at least one requirement to install (see \"pip help install\")\n", 0.5);
        }
        self.resolve_and_install(work, reqs, project, upgrade, prefer_binary)
    }

    fn read_requirements(&self, work: &SimState, path: &str, depth: u32) -> Result<(Vec<String>, bool), Run> {
        let key = path.trim_start_matches("./");
        let Some(content) = work.files.get(key) else {
            return Err(Run::fail(
                1,
                format!("ERROR: Could not open requirements file: [Errno 2] No such file or directory: '{path}'\n"),
                0.3,
            ));
        };
        let mut reqs = Vec::new();
        let mut project = false;
        for line in content.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(nested) = line.strip_prefix("-r ").or_else(|| line.strip_prefix("--requirement ")) {
                if depth < 4 {
                    let (r, p) = self.read_requirements(work, nested.trim(), depth + 1)?;
                    reqs.extend(r);
                    project |= p;
                }
                continue;
            }
            if line == "." || line == "-e ." || line == "-e ./" {
                project = true;
                continue;
            }
            if line.starts_with('-') {
                continue;
            }
            reqs.push(line.to_string());
        }
        Ok((reqs, project))
    }

    fn resolve_and_install(
        &self,
        work: &mut SimState,
        raw_reqs: Vec<String>,
        project: bool,
        upgrade: bool,
        prefer_binary: bool,
    ) -> Run {
        let proj = self.project();
        let mut requests: Vec<Requirement> = Vec::new();
        if project {
            if !work.files.contains_key("pyproject.toml") && !work.files.contains_key("setup.py") {
                return Run::fail(
                    1,
                    "ERROR: Directory '.' is not installable. Neither 'setup.py' nor 'pyproject.toml' found.\n",
                    0.5,
                );
            }
            for f in &proj.requires_facts {
                if !work.facts.contains(f) {
                    return Run::fail(1, build_failure(&proj.name, &proj.import_name(), f), 4.0);
                }
            }
        }
        let all_raw = raw_reqs.iter().chain(if project { proj.install_requires.iter() } else { [].iter() });
        for raw in all_raw {
            let Some(req) = Requirement::parse(raw) else {
                return Run::fail(1, format!("ERROR: Invalid requirement: '{raw}'\n"), 0.3);
            };
            match requests.iter_mut().find(|r| r.name == req.name) {
                Some(existing) => existing.specs.extend(req.specs),
                None => requests.push(req),
            }
        }

        let mut chosen: BTreeMap<String, String> = BTreeMap::new();
        let mut satisfied: Vec<(String, String)> = Vec::new();
        let mut stdout = String::new();
        for req in &requests {
            let Some(spec) = self.package(&req.name) else {
                return Run::fail(
                    1,
                    format!(
                        "ERROR: Could not find a version that satisfies the requirement {} (from versions: none)\nERROR: No matching distribution found for {}\n",
                        req.raw, req.name
                    ),
                    2.0,
                );
            };
            if let Some(v) = work.packages.get(&req.name) {
                if !upgrade && req.satisfied_by(v) {
                    satisfied.push((req.name.clone(), v.clone()));
                    continue;
                }
            }
            let mut candidates: Vec<&String> = spec.versions.iter().filter(|v| req.satisfied_by(v)).collect();
            candidates.sort_by(|a, b| cmp_versions(b, a));
            let Some(pick) = candidates.first() else {
                let mut all = spec.versions.clone();
                all.sort_by(|a, b| cmp_versions(a, b));
                return Run::fail(
                    1,
                    format!(
                        "ERROR: Could not find a version that satisfies the requirement {} (from versions: {})\nERROR: No matching distribution found for {}\n",
                        req.raw,
                        all.join(", "),
                        req.name
                    ),
                    2.0,
                );
            };
            stdout.push_str(&format!("Collecting {}\n", req.raw));
            chosen.insert(req.name.clone(), (*pick).clone());
        }

        let mut final_set = work.packages.clone();
        final_set.extend(chosen.clone());
        for [a, b] in &self.scenario.conflicts {
            let (Some((an, av)), Some((bn, bv))) = (split_pin(a), split_pin(b)) else { continue };
            let hit = final_set.get(&an) == Some(&av) && final_set.get(&bn) == Some(&bv);
            if !hit || !(chosen.contains_key(&an) || chosen.contains_key(&bn)) {
                continue;
            }
            let pinned = |n: &str| requests.iter().any(|r| r.name == n && r.specs.iter().any(|s| s.op == "=="));
            // the side to blame is the one nobody pinned explicitly
            let ((cn, cv), (on, ov)) = if pinned(&an) && !pinned(&bn) {
                ((bn.clone(), bv.clone()), (an.clone(), av.clone()))
            } else {
                ((an.clone(), av.clone()), (bn.clone(), bv.clone()))
            };
            let other_line = if pinned(&on) {
                format!("    The user requested {on}=={ov}\n")
            } else if !chosen.contains_key(&on) {
                format!("    {on}=={ov} is already installed\n")
            } else {
                format!("    {on} {ov} was selected\n")
            };
            return Run {
                exit: 1,
                stdout,
                stderr: format!(
                    "ERROR: Cannot install {an}=={av} and {bn}=={bv} because these package versions have conflicting dependencies.\n\n\
                     The conflict is caused by:\n{other_line}    {cn} {cv} depends on {on}!={ov}\n\n\
                     To fix this you could try to:\n1. loosen the range of package versions you've specified\n\
                     2. remove package versions to allow pip to attempt to solve the dependency conflict\n\n\
                     ERROR: ResolutionImpossible: for help visit https://pip.pypa.io/en/latest/topics/dependency-resolution/#dealing-with-dependency-conflicts\n"
                ),
                duration: 6.0,
            };
        }

        let mut duration = 1.0;
        let mut warnings = String::new();
        for (name, _) in &chosen {
            let spec = self.package(name).expect("resolved above");
            let binary = prefer_binary && spec.binary_seconds.is_some();
            if !binary {
                for f in &spec.requires_facts {
                    if !work.facts.contains(f) {
                        return Run { exit: 1, stdout, stderr: build_failure(name, &spec.import_name(name), f), duration: duration + 4.0 };
                    }
                }
            }
            duration += if binary { spec.binary_seconds.unwrap_or(0.0) } else { spec.install_seconds };
            if let Some(w) = &spec.install_warning {
                warnings.push_str(w);
                if !w.ends_with('\n') {
                    warnings.push('\n');
                }
            }
        }

        for (n, v) in &satisfied {
            stdout.push_str(&format!("Requirement already satisfied: {n} in {SITE_PACKAGES} ({v})\n"));
        }
        stdout.push_str(&warnings);
        let mut installed: Vec<String> = chosen.iter().map(|(n, v)| format!("{n}-{v}")).collect();
        if project {
            duration += 2.0;
            installed.push(format!("{}-0.1.0", proj.name));
            work.facts.insert("project_installed".into());
        }
        work.packages.extend(chosen);
        if !installed.is_empty() {
            stdout.push_str(&format!("Successfully installed {}\n", installed.join(" ")));
        }
        Run::ok(stdout, duration)
    }

    fn pytest(&self, work: &SimState, via_python: bool) -> Run {
        if !work.packages.contains_key("pytest") {
            return if via_python {
                Run::fail(1, "/usr/local/bin/python: No module named pytest\n", 0.2)
            } else {
                Run::fail(127, "sh: 1: pytest: command not found\n", 0.01)
            };
        }
        let test_file = work
            .files
            .keys()
            .find(|f| {
                let name = f.rsplit('/').next().unwrap_or(f);
                name.starts_with("test_") && name.ends_with(".py")
            })
            .cloned()
            .unwrap_or_else(|| "tests/test_placeholder.py".into());
        let duration = self.scenario.test_seconds;
        let collection_error = |detail: String| Run {
            exit: 2,
            stdout: format!(
                "============================= test session starts ==============================\n\
                 collected 0 items / 1 error\n\n\
                 ==================================== ERRORS ====================================\n\
                 ________________ ERROR collecting {test_file} ________________\n\
                 ImportError while importing test module '/repo/{test_file}'.\n\
                 {detail}\n\
                 =========================== short test summary info ============================\n\
                 ERROR {test_file}\n\
                 !!!!!!!!!!!!!!!!!!!! Interrupted: 1 error during collection !!!!!!!!!!!!!!!!!!!!\n"
            ),
            stderr: String::new(),
            duration,
        };
        for clause in self.scenario.predicate_clauses() {
            if work.holds(&clause) {
                continue;
            }
            match clause {
                Clause::Installed { ref name, .. } if name == "pytest" => {}
                Clause::Installed { name, version } => {
                    let module = self.package(&name).map(|p| p.import_name(&name)).unwrap_or_else(|| name.replace('-', "_"));
                    if work.packages.contains_key(&name) {
                        let want = version.unwrap_or_default();
                        return collection_error(format!(
                            "E   ImportError: cannot import name 'feature' from '{module}' (tests require {name}=={want})"
                        ));
                    }
                    return collection_error(format!("E   ModuleNotFoundError: No module named '{module}'"));
                }
                Clause::Fact(f) if f == "project_installed" => {
                    return collection_error(format!(
                        "E   ModuleNotFoundError: No module named '{}'",
                        self.project().import_name()
                    ));
                }
                Clause::Fact(f) => {
                    return collection_error(format!("E   RuntimeError: environment requirement not satisfied: {f}"));
                }
                Clause::File(p) => {
                    return Run::fail(4, format!("ERROR: file or directory not found: {p}\n"), duration);
                }
            }
        }
        let n = self.scenario.tests_count;
        Run::ok(
            format!(
                "============================= test session starts ==============================\n\
                 platform linux -- Python 3.11.9, pytest-8.2.0\n\
                 collected {n} items\n\n\
                 ========================= {n} tests collected in 0.12s =========================\n"
            ),
            duration,
        )
    }

    fn python(&self, work: &mut SimState, args: &[String]) -> Run {
        match args.first().map(String::as_str) {
            Some("--version") | Some("-V") => Run::ok("Python 3.11.9\n", 0.05),
            Some("-m") => {
                let module = args.get(1).map(String::as_str).unwrap_or("");
                let root = module.split('.').next().unwrap_or("");
                if self.importable(work, root) {
                    Run::ok("", 0.5)
                } else {
                    Run::fail(1, format!("/usr/local/bin/python: No module named {module}\n"), 0.2)
                }
            }
            Some("-c") => {
                let code = args.get(1).map(String::as_str).unwrap_or("");
                for stmt in code.split(|c| c == ';' || c == '\n') {
                    let stmt = stmt.trim();
                    let names: Vec<&str> = if let Some(r) = stmt.strip_prefix("import ") {
                        r.split(',').map(|s| s.trim().split_whitespace().next().unwrap_or("")).collect()
                    } else if let Some(r) = stmt.strip_prefix("from ") {
                        vec![r.split_whitespace().next().unwrap_or("")]
                    } else {
                        continue;
                    };
                    for n in names {
                        let root = n.split('.').next().unwrap_or("");
                        if !root.is_empty() && !self.importable(work, root) {
                            return Run::fail(
                                1,
                                format!(
                                    "Traceback (most recent call last):\n  File \"<string>\", line 1, in <module>\nModuleNotFoundError: No module named '{root}'\n"
                                ),
                                0.1,
                            );
                        }
                    }
                }
                Run::ok("", 0.1)
            }
            Some(script) if !script.starts_with('-') => {
                if work.files.contains_key(script.trim_start_matches("./")) {
                    Run::ok("", 0.5)
                } else {
                    Run::fail(2, format!("python: can't open file '/repo/{script}': [Errno 2] No such file or directory\n"), 0.05)
                }
            }
            _ => Run::ok("Python 3.11.9 (main) [GCC 12.2.0] on linux\n", 0.05),
        }
    }

    fn poetry(&self, work: &mut SimState, args: &[String], stdin: Option<&str>) -> Run {
        if !work.packages.contains_key("poetry") {
            return Run::fail(127, "sh: 1: poetry: command not found\n", 0.01);
        }
        match args.first().map(String::as_str) {
            Some("--version") => Run::ok("Poetry (version 1.8.3)\n", 0.3),
            Some("install") => {
                if !work.files.contains_key("pyproject.toml") {
                    return Run::fail(1, "Poetry could not find a pyproject.toml file in /repo or its parents\n", 0.3);
                }
                let mut run = self.resolve_and_install(work, Vec::new(), true, false, args.iter().any(|a| a == "--prefer-binary"));
                if run.exit == 0 {
                    run.stdout = format!("Installing dependencies from lock file\n\n{}", run.stdout);
                }
                run
            }
            Some("show") => Run::ok(work.packages.iter().map(|(n, v)| format!("{n} {v}\n")).collect::<String>(), 0.5),
            Some("lock") | Some("check") | Some("config") | Some("env") => Run::ok("", 0.5),
            Some("run") => {
                let rest = args[1..].join(" ");
                self.run_simple(work, &rest, stdin)
            }
            Some(other) => Run::fail(1, format!("The command \"{other}\" does not exist.\n"), 0.2),
            None => Run::ok("Poetry (version 1.8.3)\n", 0.2),
        }
    }

    fn coreutils(&self, work: &SimState, argv: &[String], stdin: Option<&str>) -> Run {
        let cmd = argv[0].as_str();
        let args = &argv[1..];
        let positional: Vec<&str> = args.iter().map(String::as_str).filter(|a| !a.starts_with('-')).collect();
        match cmd {
            "true" => Run::ok("", 0.0),
            "pwd" => Run::ok("/repo\n", 0.0),
            "echo" => Run::ok(format!("{}\n", args.join(" ")), 0.0),
            "env" | "printenv" => Run::ok("PATH=/usr/local/bin:/usr/bin:/bin\nHOME=/root\nPYTHON_VERSION=3.11.9\n", 0.0),
            "cat" => {
                if positional.is_empty() {
                    return Run::ok(stdin.unwrap_or(""), 0.0);
                }
                let mut run = Run::ok("", 0.01);
                for p in positional {
                    match work.files.get(p.trim_start_matches("./")) {
                        Some(c) => run.stdout.push_str(c),
                        None => {
                            run.exit = 1;
                            run.stderr.push_str(&format!("cat: {p}: No such file or directory\n"));
                        }
                    }
                }
                run
            }
            "ls" => {
                let paths = work.all_paths();
                let targets = if positional.is_empty() { vec!["."] } else { positional };
                let mut run = Run::ok("", 0.01);
                for t in targets {
                    let t = t.trim_start_matches("./").trim_end_matches('/');
                    if t.is_empty() || t == "." {
                        let top: BTreeSet<&str> = paths.keys().map(|p| p.split('/').next().unwrap_or(p)).collect();
                        for name in top {
                            run.stdout.push_str(name);
                            run.stdout.push('\n');
                        }
                        continue;
                    }
                    match paths.get(t) {
                        Some(true) => {
                            let prefix = format!("{t}/");
                            let kids: BTreeSet<&str> = paths
                                .keys()
                                .filter_map(|p| p.strip_prefix(&prefix))
                                .map(|r| r.split('/').next().unwrap_or(r))
                                .collect();
                            for k in kids {
                                run.stdout.push_str(k);
                                run.stdout.push('\n');
                            }
                        }
                        Some(false) => {
                            run.stdout.push_str(t);
                            run.stdout.push('\n');
                        }
                        None => {
                            run.exit = 2;
                            run.stderr.push_str(&format!("ls: cannot access '{t}': No such file or directory\n"));
                        }
                    }
                }
                run
            }
            "find" => find(work, args),
            "grep" => grep(work, args, stdin),
            "head" | "tail" => {
                let mut n = 10usize;
                let mut file = None;
                let mut i = 0;
                while i < args.len() {
                    let a = &args[i];
                    if a == "-n" {
                        n = args.get(i + 1).and_then(|v| v.parse().ok()).unwrap_or(10);
                        i += 2;
                        continue;
                    }
                    if let Some(num) = a.strip_prefix('-').and_then(|v| v.parse().ok()) {
                        n = num;
                    } else if !a.starts_with('-') {
                        file = Some(a.as_str());
                    }
                    i += 1;
                }
                let text = match file {
                    Some(f) => match work.files.get(f.trim_start_matches("./")) {
                        Some(c) => c.as_str(),
                        None => return Run::fail(1, format!("{cmd}: cannot open '{f}' for reading: No such file or directory\n"), 0.0),
                    },
                    None => stdin.unwrap_or(""),
                };
                let lines: Vec<&str> = text.lines().collect();
                let pick = if cmd == "head" { &lines[..n.min(lines.len())] } else { &lines[lines.len().saturating_sub(n)..] };
                Run::ok(pick.iter().map(|l| format!("{l}\n")).collect::<String>(), 0.0)
            }
            "wc" => {
                let text = match positional.first() {
                    Some(f) => work.files.get(f.trim_start_matches("./")).cloned().unwrap_or_default(),
                    None => stdin.unwrap_or("").to_string(),
                };
                Run::ok(format!("{}\n", text.lines().count()), 0.0)
            }
            "which" => {
                let mut run = Run::ok("", 0.01);
                for p in positional {
                    let found = match p {
                        "python" | "python3" | "pip" | "pip3" | "sh" | "bash" | "ls" | "cat" => true,
                        "gcc" | "cc" | "g++" | "make" => work.facts.contains("compiler"),
                        "cargo" | "rustc" => work.facts.contains("rust"),
                        other => work.packages.contains_key(other) || work.facts.contains(&format!("apt:{other}")),
                    };
                    if found {
                        run.stdout.push_str(&format!("/usr/bin/{p}\n"));
                    } else {
                        run.exit = 1;
                    }
                }
                run
            }
            _ => Run::fail(127, format!("sh: 1: {cmd}: command not found\n"), 0.0),
        }
    }
}

fn apt(work: &mut SimState, args: &[String]) -> Run {
    match args.first().map(String::as_str) {
        Some("update") => Run::ok("Reading package lists... Done\n", 5.0),
        Some("install") => {
            let pkgs: Vec<&str> = args[1..].iter().map(String::as_str).filter(|a| !a.starts_with('-')).collect();
            if pkgs.is_empty() {
                return Run::ok("0 upgraded, 0 newly installed, 0 to remove and 0 not upgraded.\n", 1.0);
            }
            for p in &pkgs {
                let fact = match *p {
                    "build-essential" | "gcc" | "g++" => "compiler".to_string(),
                    "cargo" | "rustc" => "rust".to_string(),
                    other => format!("apt:{other}"),
                };
                work.facts.insert(fact);
            }
            Run::ok(format!("Setting up {} ...\n", pkgs.join(" ")), 20.0)
        }
        _ => Run::fail(100, "E: Invalid operation\n", 0.1),
    }
}

fn build_failure(name: &str, import: &str, fact: &str) -> String {
    let detail = match fact {
        "compiler" => format!("building '{import}._ext' extension\n      error: command 'gcc' failed: No such file or directory"),
        "rust" => "error: can't find Rust compiler\n      If you are using an outdated pip version, it is possible a prebuilt wheel is available".to_string(),
        other => format!("error: required build tool `{other}` is not available"),
    };
    format!(
        "  error: subprocess-exited-with-error\n\n  \
         × Building wheel for {name} (pyproject.toml) did not run successfully.\n  \
         │ exit code: 1\n  ╰─> [2 lines of output]\n      running build_ext\n      {detail}\n      [end of output]\n\n\
         ERROR: Failed building wheel for {name}\n\
         ERROR: Could not build wheels for {name}, which is required to install pyproject.toml-based projects\n"
    )
}

fn glob_match(pattern: &str, name: &str) -> bool {
    let re = format!("^{}$", regex::escape(pattern).replace(r"\*", ".*").replace(r"\?", "."));
    cached_regex(&re).map_or(false, |r| r.is_match(name))
}

fn find(work: &SimState, args: &[String]) -> Run {
    let mut root = ".".to_string();
    let mut maxdepth = usize::MAX;
    let mut name: Option<(String, bool)> = None;
    let mut kind: Option<bool> = None;
    let mut i = 0;
    while i < args.len() {
        let next = args.get(i + 1).cloned().unwrap_or_default();
        match args[i].as_str() {
            "-maxdepth" => {
                maxdepth = next.parse().unwrap_or(usize::MAX);
                i += 1;
            }
            "-name" => {
                name = Some((next, false));
                i += 1;
            }
            "-iname" => {
                name = Some((next, true));
                i += 1;
            }
            "-type" => {
                kind = Some(next == "d");
                i += 1;
            }
            a if !a.starts_with('-') && i == 0 => root = a.to_string(),
            _ => {}
        }
        i += 1;
    }
    let base = root.trim_start_matches("./").trim_end_matches('/').to_string();
    let base = if base == "." { String::new() } else { base };
    let paths = work.all_paths();
    if !base.is_empty() && !paths.contains_key(&base) {
        return Run::fail(1, format!("find: '{root}': No such file or directory\n"), 0.02);
    }
    let mut out = String::new();
    for (p, is_dir) in &paths {
        let rel = if base.is_empty() {
            p.as_str()
        } else if let Some(r) = p.strip_prefix(&format!("{base}/")) {
            r
        } else {
            continue;
        };
        if rel.split('/').count() > maxdepth {
            continue;
        }
        if let Some(k) = kind {
            if k != *is_dir {
                continue;
            }
        }
        let leaf = p.rsplit('/').next().unwrap_or(p);
        if let Some((pat, ci)) = &name {
            let ok = if *ci { glob_match(&pat.to_lowercase(), &leaf.to_lowercase()) } else { glob_match(pat, leaf) };
            if !ok {
                continue;
            }
        }
        let shown = if root == "." || root == "./" { format!("./{p}") } else { format!("{}/{rel}", root.trim_end_matches('/')) };
        out.push_str(&shown);
        out.push('\n');
    }
    Run::ok(out, 0.02)
}

fn grep(work: &SimState, args: &[String], stdin: Option<&str>) -> Run {
    let mut insensitive = false;
    let mut invert = false;
    let mut quiet = false;
    let mut recursive = false;
    let mut rest = Vec::new();
    for a in args {
        if a.starts_with('-') && a.len() > 1 && rest.is_empty() {
            insensitive |= a.contains('i');
            invert |= a.contains('v');
            quiet |= a.contains('q');
            recursive |= a.contains('r') || a.contains('R');
        } else {
            rest.push(a.as_str());
        }
    }
    let Some(pattern) = rest.first() else {
        return Run::fail(2, "Usage: grep [OPTION]... PATTERNS [FILE]...\n", 0.0);
    };
    let pat = if insensitive { format!("(?i){pattern}") } else { pattern.to_string() };
    let re = cached_regex(&pat).unwrap_or_else(|_| cached_regex(&regex::escape(pattern)).expect("escaped"));
    let mut sources: Vec<(Option<String>, String)> = Vec::new();
    if rest.len() == 1 {
        sources.push((None, stdin.unwrap_or("").to_string()));
    } else {
        for f in &rest[1..] {
            let key = f.trim_start_matches("./").trim_end_matches('/');
            if recursive {
                for (p, c) in &work.files {
                    if key.is_empty() || key == "." || p.starts_with(&format!("{key}/")) || p == key {
                        sources.push((Some(p.clone()), c.clone()));
                    }
                }
            } else if let Some(c) = work.files.get(key) {
                sources.push((if rest.len() > 2 { Some(key.to_string()) } else { None }, c.clone()));
            }
        }
    }
    let mut out = String::new();
    let mut any = false;
    for (label, text) in sources {
        for line in text.lines() {
            if re.is_match(line) != invert {
                any = true;
                match &label {
                    Some(l) => out.push_str(&format!("{l}:{line}\n")),
                    None => out.push_str(&format!("{line}\n")),
                }
            }
        }
    }
    if quiet {
        out.clear();
    }
    Run { exit: if any { 0 } else { 1 }, stdout: out, stderr: String::new(), duration: 0.01 }
}

#[derive(Debug, Clone)]
struct Spec {
    op: String,
    version: String,
}

#[derive(Debug, Clone)]
struct Requirement {
    raw: String,
    name: String,
    specs: Vec<Spec>,
}

impl Requirement {
    fn parse(raw: &str) -> Option<Requirement> {
        let body = raw.split(';').next()?.trim();
        let name_end = body
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.'))
            .unwrap_or(body.len());
        let name = &body[..name_end];
        if name.is_empty() {
            return None;
        }
        let mut rest = body[name_end..].trim();
        if rest.starts_with('[') {
            rest = rest.split_once(']').map_or("", |(_, r)| r).trim();
        }
        let mut specs = Vec::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let op = ["==", "!=", ">=", "<=", "~=", ">", "<"].iter().find(|op| part.starts_with(**op))?;
            let version = part[op.len()..].trim();
            if version.is_empty() {
                return None;
            }
            specs.push(Spec { op: op.to_string(), version: version.to_string() });
        }
        Some(Requirement { raw: raw.trim().to_string(), name: normalize_dist(name), specs })
    }

    fn satisfied_by(&self, version: &str) -> bool {
        self.specs.iter().all(|s| {
            let ord = cmp_versions(version, &s.version);
            match s.op.as_str() {
                "==" => ord == Ordering::Equal,
                "!=" => ord != Ordering::Equal,
                ">=" => ord != Ordering::Less,
                "<=" => ord != Ordering::Greater,
                ">" => ord == Ordering::Greater,
                "<" => ord == Ordering::Less,
                "~=" => {
                    let prefix: Vec<&str> = s.version.split('.').collect();
                    let keep = prefix.len().saturating_sub(1).max(1);
                    ord != Ordering::Less && version.split('.').take(keep).eq(prefix.iter().take(keep).copied())
                }
                _ => false,
            }
        })
    }
}

fn split_pin(pin: &str) -> Option<(String, String)> {
    let (n, v) = pin.split_once("==")?;
    Some((normalize_dist(n), v.trim().to_string()))
}

/// Dotted-numeric comparison; non-numeric parts compare as strings.
pub(crate) fn cmp_versions(a: &str, b: &str) -> Ordering {
    let pa: Vec<&str> = a.split('.').collect();
    let pb: Vec<&str> = b.split('.').collect();
    for i in 0..pa.len().max(pb.len()) {
        let x = pa.get(i).copied().unwrap_or("0");
        let y = pb.get(i).copied().unwrap_or("0");
        let ord = match (x.parse::<u64>(), y.parse::<u64>()) {
            (Ok(x), Ok(y)) => x.cmp(&y),
            _ => x.cmp(y),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

impl Sandbox for SimSandbox {
    fn state(&self) -> EnvironmentState {
        EnvironmentState { handle: format!("sim:{}", self.scenario.name), round: self.round, backend: BackendKind::Simulated }
    }

    fn set_round(&mut self, round: u32) {
        self.round = round;
    }

    fn execute(&mut self, cmd: &AtomicCommand) -> Result<ExecutionRecord, SandboxError> {
        if self.closed {
            return Err(SandboxError::SessionClosed);
        }
        let mut work = self.state.clone();
        let run = self.run_text(&mut work, cmd.text());
        if run.duration > cmd.timeout() {
            return Ok(ExecutionRecord::new(
                cmd.clone(),
                super::TIMEOUT_EXIT,
                &run.stdout.lines().take(3).map(|l| format!("{l}\n")).collect::<String>(),
                &format!("timeout: command exceeded {}s and was killed\n", cmd.timeout()),
                cmd.timeout(),
                true,
            ));
        }
        if run.exit == 0 {
            self.state = work;
        }
        Ok(ExecutionRecord::new(cmd.clone(), run.exit, &run.stdout, &run.stderr, run.duration, false))
    }

    fn snapshot(&mut self) -> Result<SnapshotId, SandboxError> {
        if self.closed {
            return Err(SandboxError::SessionClosed);
        }
        self.next_snapshot += 1;
        let id = format!("snap-{}", self.next_snapshot);
        self.snapshots.insert(id.clone(), self.state.clone());
        Ok(SnapshotId { id, round: self.round })
    }

    fn restore(&mut self, id: &SnapshotId) -> Result<EnvironmentState, SandboxError> {
        if self.closed {
            return Err(SandboxError::SnapshotExpired(id.id.clone()));
        }
        let state = self.snapshots.get(&id.id).ok_or_else(|| SandboxError::SnapshotExpired(id.id.clone()))?;
        self.state = state.clone();
        Ok(self.state())
    }

    fn check_solved(&mut self) -> Result<bool, SandboxError> {
        Ok(self.scenario.predicate_clauses().iter().all(|c| self.state.holds(c)))
    }

    fn repo_tree(&self) -> Option<RepoTree> {
        Some(self.scenario.repo_tree())
    }

    fn close(&mut self) {
        self.closed = true;
        self.snapshots.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::command::Origin;

    fn c(s: &str) -> AtomicCommand {
        AtomicCommand::new(s, Origin::MainAgent).unwrap()
    }

    fn conflict_numpy() -> SimScenario {
        SimScenario::from_json(
            r#"{
            "name": "conflict-numpy",
            "virtual_fs": {"requirements.txt": "numpy==1.26.0\npkg-b\n", "tests/test_a.py": "import numpy\n"},
            "registry": {
                "numpy": {"versions": ["1.19.5", "1.26.0"]},
                "pkg-b": {"versions": ["1.2", "2.0"], "import_name": "pkg_b"},
                "pytest": {"versions": ["8.2.0"]},
                "cext": {"versions": ["1.0"], "requires_facts": ["compiler"]},
                "heavy": {"versions": ["3.0"], "install_seconds": 900, "binary_seconds": 30}
            },
            "conflicts": [["pkg-b==2.0", "numpy==1.26.0"]],
            "include": ["python", "apt", "coreutils"],
            "solved_predicate": {"all": ["installed:pytest", "installed:numpy", "installed:pkg-b"]},
            "solution": ["pip install pkg-b==1.2", "pip install -r requirements.txt", "pip install pytest"]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn empty_behaviors_return_127() {
        let s = SimScenario::from_json(r#"{"name":"m","solved_predicate":{"all":["fact:x"]}}"#).unwrap();
        let mut sb = SimSandbox::new(s).unwrap();
        for cmd in ["ls", "pip install a", "python -m pytest"] {
            let r = sb.execute(&c(cmd)).unwrap();
            assert_eq!(r.exit_code, 127);
            assert!(r.stderr.contains("command not found"));
        }
    }

    #[test]
    fn initial_state_dump() {
        let sb = SimSandbox::new(conflict_numpy()).unwrap();
        assert!(sb.installed().is_empty());
        assert_eq!(sb.scenario().conflicts, vec![["pkg-b==2.0".to_string(), "numpy==1.26.0".to_string()]]);
        assert_eq!(sb.scenario().registry["pkg-b"].versions, vec!["1.2", "2.0"]);
        assert_eq!(sb.state().round, 0);
        assert_eq!(sb.state().backend, BackendKind::Simulated);
    }

    #[test]
    fn conflict_then_repair() {
        let mut sb = SimSandbox::new(conflict_numpy()).unwrap();
        let r = sb.execute(&c("pip install -r requirements.txt")).unwrap();
        assert_eq!(r.exit_code, 1);
        assert!(r.stderr.contains("ResolutionImpossible"));
        assert!(r.stderr.contains("pkg-b 2.0 depends on numpy!=1.26.0"));
        assert!(r.stderr.contains("The user requested numpy==1.26.0"));
        assert!(sb.installed().is_empty(), "failed installs are atomic");

        let r = sb.execute(&c("pip index versions pkg-b")).unwrap();
        assert!(r.stdout.contains("Available versions: 2.0, 1.2"));

        assert!(sb.execute(&c("pip install pkg-b==1.2")).unwrap().succeeded());
        let r = sb.execute(&c("pip install -r requirements.txt")).unwrap();
        assert!(r.succeeded(), "{}", r.stderr);
        assert!(r.stdout.contains("Requirement already satisfied: pkg-b"));
        assert!(!sb.check_solved().unwrap());
        assert!(sb.execute(&c("pip install pytest")).unwrap().succeeded());
        assert!(sb.check_solved().unwrap());
    }

    #[test]
    fn solution_script_solves() {
        let s = conflict_numpy();
        let mut sb = SimSandbox::new(s.clone()).unwrap();
        assert!(!sb.check_solved().unwrap());
        for step in &s.solution {
            assert!(sb.execute(&c(step)).unwrap().succeeded(), "{step}");
        }
        assert!(sb.check_solved().unwrap());
    }

    #[test]
    fn partial_predicate_is_unsolved() {
        let mut sb = SimSandbox::new(conflict_numpy()).unwrap();
        sb.execute(&c("pip install pytest numpy")).unwrap();
        assert!(!sb.check_solved().unwrap());
    }

    #[test]
    fn timeout_record() {
        let mut sb = SimSandbox::new(conflict_numpy()).unwrap();
        let r = sb.execute(&c("pip install heavy")).unwrap();
        assert!(r.timed_out);
        assert_eq!(r.exit_code, 124);
        assert!(!sb.installed().contains_key("heavy"));
        let r = sb.execute(&c("pip install --prefer-binary heavy")).unwrap();
        assert!(r.succeeded());
    }

    #[test]
    fn toolchain_fact_gates_build() {
        let mut sb = SimSandbox::new(conflict_numpy()).unwrap();
        let r = sb.execute(&c("pip install cext")).unwrap();
        assert!(r.stderr.contains("command 'gcc' failed"));
        assert_eq!(sb.execute(&c("which gcc")).unwrap().exit_code, 1);
        assert!(sb.execute(&c("apt-get install -y build-essential")).unwrap().succeeded());
        assert!(sb.execute(&c("pip install cext")).unwrap().succeeded());
    }

    #[test]
    fn pytest_reports_first_unmet_clause() {
        let mut sb = SimSandbox::new(conflict_numpy()).unwrap();
        let r = sb.execute(&c("python -m pytest --collect-only -q")).unwrap();
        assert!(r.stderr.contains("No module named pytest"));
        sb.execute(&c("pip install pytest")).unwrap();
        let r = sb.execute(&c("python -m pytest --collect-only -q")).unwrap();
        assert_eq!(r.exit_code, 2);
        assert!(r.stdout.contains("No module named 'numpy'"));
    }

    #[test]
    fn chains_are_atomic_and_pipes_filter() {
        let mut sb = SimSandbox::new(conflict_numpy()).unwrap();
        let r = sb.execute(&c("pip install pytest && pip install nope")).unwrap();
        assert_ne!(r.exit_code, 0);
        assert!(sb.installed().is_empty());
        sb.execute(&c("pip install numpy==1.19.5 pytest")).unwrap();
        let r = sb.execute(&c("pip list | grep numpy")).unwrap();
        assert_eq!(r.stdout, "numpy 1.19.5\n");
        let r = sb.execute(&c("false_cmd || echo fallback")).unwrap();
        assert_eq!(r.stdout, "fallback\n");
        assert_eq!(r.exit_code, 0);
    }

    #[test]
    fn snapshot_restore_and_close() {
        let mut sb = SimSandbox::new(conflict_numpy()).unwrap();
        sb.set_round(3);
        let snap = sb.snapshot().unwrap();
        assert_eq!(snap.round, 3);
        let probe = c("pip freeze");
        let before = sb.execute(&probe).unwrap();
        let a1 = sb.execute(&c("pip install pkg-b==1.2")).unwrap();
        let a2 = sb.execute(&c("pip install pytest")).unwrap();
        sb.restore(&snap).unwrap();
        assert_eq!(sb.execute(&probe).unwrap(), before);
        assert_eq!(sb.execute(&c("pip install pkg-b==1.2")).unwrap(), a1);
        assert_eq!(sb.execute(&c("pip install pytest")).unwrap(), a2);
        sb.close();
        assert!(matches!(sb.restore(&snap), Err(SandboxError::SnapshotExpired(_))));
        assert!(matches!(sb.execute(&probe), Err(SandboxError::SessionClosed)));
    }

    #[test]
    fn empty_action_set_is_identity() {
        let mut sb = SimSandbox::new(conflict_numpy()).unwrap();
        let before = sb.state.clone();
        let records = super::super::execute_all(&mut sb, &[]).unwrap();
        assert!(records.is_empty());
        assert_eq!(sb.state, before);
    }

    #[test]
    fn coreutils_views() {
        let mut sb = SimSandbox::new(conflict_numpy()).unwrap();
        assert_eq!(sb.execute(&c("cat requirements.txt")).unwrap().stdout, "numpy==1.26.0\npkg-b\n");
        assert_eq!(sb.execute(&c("ls")).unwrap().stdout, "requirements.txt\ntests\n");
        assert_eq!(sb.execute(&c("ls tests")).unwrap().stdout, "test_a.py\n");
        assert_eq!(sb.execute(&c("find . -name 'test_*.py'")).unwrap().stdout, "./tests/test_a.py\n");
        assert_eq!(sb.execute(&c("grep -r numpy .")).unwrap().stdout.lines().count(), 2);
        assert_eq!(sb.execute(&c("cat nope")).unwrap().exit_code, 1);
    }

    #[test]
    fn version_ordering() {
        assert_eq!(cmp_versions("1.10", "1.9"), Ordering::Greater);
        assert_eq!(cmp_versions("2.0", "2"), Ordering::Equal);
        let r = Requirement::parse("numpy>=1.20,<2 ; python_version > '3.8'").unwrap();
        assert!(r.satisfied_by("1.26.0"));
        assert!(!r.satisfied_by("2.0"));
        assert!(Requirement::parse("pkg[extra]==1.0").unwrap().satisfied_by("1.0"));
        assert!(Requirement::parse("pkg~=1.4").unwrap().satisfied_by("1.9"));
        assert!(!Requirement::parse("pkg~=1.4").unwrap().satisfied_by("2.0"));
    }
}
