//! Pre-interaction structural cues: dependency strategy, importability and
//! test structure, extracted from a read-only repository snapshot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub const DEFAULT_PEEK_LIMIT: usize = 64 * 1024;
pub const PROMPT_CHAR_CAP: usize = 1200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    File,
    Dir,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEntry {
    pub path: String,
    pub kind: EntryKind,
    pub size: u64,
}

/// Byte source behind a [`RepoTree`]. Implementations return at most
/// `limit` leading bytes, or `None` when the file cannot be read.
pub trait FileSource: Send + Sync {
    fn read_prefix(&self, path: &str, limit: usize) -> Option<Vec<u8>>;
}

struct DiskSource {
    root: PathBuf,
}

impl FileSource for DiskSource {
    fn read_prefix(&self, path: &str, limit: usize) -> Option<Vec<u8>> {
        use std::io::Read;
        let file = std::fs::File::open(self.root.join(path)).ok()?;
        let mut buf = Vec::new();
        file.take(limit as u64).read_to_end(&mut buf).ok()?;
        Some(buf)
    }
}

/// In-memory files; a `None` value models an unreadable entry.
pub struct MemorySource {
    files: BTreeMap<String, Option<Vec<u8>>>,
}

impl FileSource for MemorySource {
    fn read_prefix(&self, path: &str, limit: usize) -> Option<Vec<u8>> {
        let bytes = self.files.get(path)?.as_ref()?;
        Some(bytes[..bytes.len().min(limit)].to_vec())
    }
}

/// Immutable snapshot of a repository's layout with bounded file access.
#[derive(Clone)]
pub struct RepoTree {
    root: PathBuf,
    entries: Vec<TreeEntry>,
    source: Arc<dyn FileSource>,
    peek_limit: usize,
}

impl fmt::Debug for RepoTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RepoTree")
            .field("root", &self.root)
            .field("entries", &self.entries.len())
            .field("peek_limit", &self.peek_limit)
            .finish()
    }
}

fn normalize(path: &str) -> Option<String> {
    let path = path.replace('\\', "/");
    let mut parts = Vec::new();
    for part in path.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                parts.pop()?;
            }
            p => parts.push(p),
        }
    }
    if parts.is_empty() {
        None
    } else {
        Some(parts.join("/"))
    }
}

impl RepoTree {
    /// Walks a directory on disk. `.git` and virtualenv directories are skipped.
    pub fn from_dir(root: &Path) -> std::io::Result<Self> {
        let meta = std::fs::metadata(root)?;
        if !meta.is_dir() {
            return Err(std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"));
        }
        let mut entries = Vec::new();
        let walker = walkdir::WalkDir::new(root).follow_links(false).into_iter().filter_entry(|e| {
            let name = e.file_name().to_string_lossy();
            !(e.depth() > 0
                && e.file_type().is_dir()
                && matches!(name.as_ref(), ".git" | ".venv" | "venv" | "node_modules" | "__pycache__"))
        });
        for entry in walker.flatten() {
            if entry.depth() == 0 {
                continue;
            }
            let Ok(rel) = entry.path().strip_prefix(root) else { continue };
            let Some(path) = normalize(&rel.to_string_lossy()) else { continue };
            let kind = if entry.file_type().is_dir() { EntryKind::Dir } else { EntryKind::File };
            let size = entry.metadata().map(|m| m.len()).unwrap_or(0);
            entries.push(TreeEntry { path, kind, size });
        }
        Ok(Self::assemble(root.to_path_buf(), entries, Arc::new(DiskSource { root: root.into() })))
    }

    /// Builds a tree from in-memory files. Keys ending in `/` declare
    /// (possibly empty) directories.
    pub fn from_files<I, K, V>(files: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<[u8]>,
    {
        let mut map = BTreeMap::new();
        let mut entries = Vec::new();
        for (k, v) in files {
            let key = k.as_ref();
            let Some(path) = normalize(key) else { continue };
            if key.ends_with('/') {
                entries.push(TreeEntry { path, kind: EntryKind::Dir, size: 0 });
            } else {
                let bytes = v.as_ref().to_vec();
                entries.push(TreeEntry { path: path.clone(), kind: EntryKind::File, size: bytes.len() as u64 });
                map.insert(path, Some(bytes));
            }
        }
        Self::assemble(PathBuf::from("."), entries, Arc::new(MemorySource { files: map }))
    }

    /// Builds a tree over an arbitrary source; used by tests to instrument reads.
    pub fn with_source(entries: Vec<TreeEntry>, source: Arc<dyn FileSource>) -> Self {
        Self::assemble(PathBuf::from("."), entries, source)
    }

    fn assemble(root: PathBuf, raw: Vec<TreeEntry>, source: Arc<dyn FileSource>) -> Self {
        let mut by_path: BTreeMap<String, TreeEntry> = BTreeMap::new();
        for e in raw {
            let Some(path) = normalize(&e.path) else { continue };
            // implied parent directories
            let mut acc = String::new();
            let parts: Vec<&str> = path.split('/').collect();
            for part in &parts[..parts.len() - 1] {
                if !acc.is_empty() {
                    acc.push('/');
                }
                acc.push_str(part);
                by_path.entry(acc.clone()).or_insert(TreeEntry {
                    path: acc.clone(),
                    kind: EntryKind::Dir,
                    size: 0,
                });
            }
            by_path.insert(path.clone(), TreeEntry { path, ..e });
        }
        RepoTree { root, entries: by_path.into_values().collect(), source, peek_limit: DEFAULT_PEEK_LIMIT }
    }

    pub fn with_peek_limit(mut self, limit: usize) -> Self {
        self.peek_limit = limit;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[TreeEntry] {
        &self.entries
    }

    pub fn peek_limit(&self) -> usize {
        self.peek_limit
    }

    pub fn is_file(&self, path: &str) -> bool {
        self.entries.iter().any(|e| e.path == path && e.kind == EntryKind::File)
    }

    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|e| e.kind == EntryKind::File).map(|e| e.path.as_str())
    }

    /// Up to `peek_limit` leading bytes of a file, decoded lossily.
    pub fn peek(&self, path: &str) -> Option<String> {
        let mut bytes = self.source.read_prefix(path, self.peek_limit)?;
        bytes.truncate(self.peek_limit);
        Some(String::from_utf8_lossy(&bytes).into_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manager {
    Poetry,
    PipRequirements,
    Setuptools,
    Pep517Generic,
    Conda,
    Unknown,
}

impl Manager {
    pub fn as_str(self) -> &'static str {
        match self {
            Manager::Poetry => "poetry",
            Manager::PipRequirements => "pip_requirements",
            Manager::Setuptools => "setuptools",
            Manager::Pep517Generic => "pep517_generic",
            Manager::Conda => "conda",
            Manager::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyStrategy {
    pub manager: Manager,
    pub evidence: Vec<String>,
    pub lockfile_present: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    SrcLayout,
    FlatPackage,
    ScriptsOnly,
    Unknown,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::SrcLayout => "src_layout",
            Layout::FlatPackage => "flat_package",
            Layout::ScriptsOnly => "scripts_only",
            Layout::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportabilityHypothesis {
    pub needs_install: bool,
    pub layout: Layout,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFramework {
    Pytest,
    Unittest,
    NoneDetected,
}

impl TestFramework {
    pub fn as_str(self) -> &'static str {
        match self {
            TestFramework::Pytest => "pytest",
            TestFramework::Unittest => "unittest",
            TestFramework::NoneDetected => "none_detected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestStructureHypothesis {
    pub tests_present: bool,
    pub test_dirs: Vec<String>,
    pub framework: TestFramework,
    pub imports_project: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorSummary {
    pub dependency: DependencyStrategy,
    pub importability: ImportabilityHypothesis,
    pub tests: TestStructureHypothesis,
}

fn file_name(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or(path)
}

fn parent(path: &str) -> &str {
    path.rsplit_once('/').map_or(".", |(p, _)| p)
}

fn is_requirements_file(path: &str) -> bool {
    let top_level = !path.contains('/');
    let in_req_dir = parent(path) == "requirements";
    let name = file_name(path);
    (top_level && name.starts_with("requirements") && name.ends_with(".txt"))
        || (in_req_dir && name.ends_with(".txt"))
}

fn pyproject_uses_poetry(text: &str) -> bool {
    text.contains("[tool.poetry]") || text.contains("poetry.core.masonry") || text.contains("poetry-core")
}

pub fn detect_dependency_strategy(tree: &RepoTree) -> DependencyStrategy {
    let readable = |p: &str| tree.is_file(p) && tree.peek(p).is_some();

    let lock = readable("poetry.lock");
    let pyproject = if tree.is_file("pyproject.toml") { tree.peek("pyproject.toml") } else { None };
    let poetry_pyproject = pyproject.as_deref().map_or(false, pyproject_uses_poetry);

    if lock || poetry_pyproject {
        let mut evidence = Vec::new();
        if lock {
            evidence.push("poetry.lock".to_string());
        }
        if pyproject.is_some() {
            evidence.push("pyproject.toml".to_string());
        }
        return DependencyStrategy { manager: Manager::Poetry, evidence, lockfile_present: lock };
    }

    let reqs: Vec<String> =
        tree.files().filter(|p| is_requirements_file(p) && readable(p)).map(str::to_string).collect();
    if !reqs.is_empty() {
        return DependencyStrategy { manager: Manager::PipRequirements, evidence: reqs, lockfile_present: false };
    }

    let setup: Vec<String> =
        ["setup.py", "setup.cfg"].iter().filter(|p| readable(p)).map(|p| p.to_string()).collect();
    if !setup.is_empty() {
        return DependencyStrategy { manager: Manager::Setuptools, evidence: setup, lockfile_present: false };
    }

    if pyproject.is_some() {
        return DependencyStrategy {
            manager: Manager::Pep517Generic,
            evidence: vec!["pyproject.toml".into()],
            lockfile_present: false,
        };
    }

    let env: Vec<String> = ["environment.yml", "environment.yaml"]
        .iter()
        .filter(|p| readable(p))
        .map(|p| p.to_string())
        .collect();
    if !env.is_empty() {
        return DependencyStrategy { manager: Manager::Conda, evidence: env, lockfile_present: false };
    }

    DependencyStrategy { manager: Manager::Unknown, evidence: Vec::new(), lockfile_present: false }
}

const NON_PACKAGE_DIRS: &[&str] = &["tests", "test", "docs", "doc", "examples", "scripts", "benchmarks", "src"];

/// Names importable from the repository root or from `src/`.
fn top_level_packages(tree: &RepoTree) -> (Vec<(String, String)>, Vec<(String, String)>) {
    let mut src = Vec::new();
    let mut flat = Vec::new();
    for f in tree.files() {
        let parts: Vec<&str> = f.split('/').collect();
        match parts.as_slice() {
            ["src", pkg, "__init__.py"] => src.push((pkg.to_string(), f.to_string())),
            ["src", module] if module.ends_with(".py") => {
                src.push((module.trim_end_matches(".py").to_string(), f.to_string()))
            }
            [pkg, "__init__.py"] if !NON_PACKAGE_DIRS.contains(pkg) => {
                flat.push((pkg.to_string(), f.to_string()))
            }
            _ => {}
        }
    }
    (src, flat)
}

pub fn assess_importability(tree: &RepoTree) -> ImportabilityHypothesis {
    let mut evidence: Vec<String> = ["pyproject.toml", "setup.py", "setup.cfg"]
        .iter()
        .filter(|p| tree.is_file(p) && tree.peek(p).is_some())
        .map(|p| p.to_string())
        .collect();
    let has_metadata = !evidence.is_empty();
    let (src, flat) = top_level_packages(tree);

    let layout = if !src.is_empty() {
        evidence.extend(src.iter().map(|(_, p)| p.clone()));
        Layout::SrcLayout
    } else if !flat.is_empty() {
        evidence.extend(flat.iter().map(|(_, p)| p.clone()));
        Layout::FlatPackage
    } else if tree.files().any(|f| f.ends_with(".py")) {
        Layout::ScriptsOnly
    } else {
        Layout::Unknown
    };
    let needs_install = has_metadata || layout == Layout::SrcLayout;
    ImportabilityHypothesis { needs_install, layout, evidence }
}

fn is_test_file_name(name: &str) -> bool {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    name.contains('.') && (stem.starts_with("test_") || stem.ends_with("_test"))
}

fn imported_roots(text: &str) -> BTreeSet<String> {
    let mut roots = BTreeSet::new();
    for line in text.lines() {
        let line = line.trim();
        let rest = if let Some(r) = line.strip_prefix("import ") {
            r
        } else if let Some(r) = line.strip_prefix("from ") {
            r.split(" import").next().unwrap_or("")
        } else {
            continue;
        };
        for item in rest.split(',') {
            let name = item.trim().split(|c: char| c == '.' || c.is_whitespace()).next().unwrap_or("");
            if !name.is_empty() {
                roots.insert(name.to_string());
            }
        }
    }
    roots
}

pub fn hypothesize_test_structure(tree: &RepoTree) -> TestStructureHypothesis {
    let mut dirs: BTreeSet<String> = BTreeSet::new();
    let mut test_files: Vec<&str> = Vec::new();
    for f in tree.files() {
        let dir = parent(f);
        let in_test_dir = dir.split('/').any(|d| d == "tests" || d == "test");
        if is_test_file_name(file_name(f)) {
            dirs.insert(dir.to_string());
            test_files.push(f);
        } else if in_test_dir && f.ends_with(".py") {
            // the named test directory itself, e.g. tests/ for tests/helpers.py
            let mut acc = Vec::new();
            for part in dir.split('/') {
                acc.push(part);
                if part == "tests" || part == "test" {
                    break;
                }
            }
            dirs.insert(acc.join("/"));
            test_files.push(f);
        }
    }

    if dirs.is_empty() {
        return TestStructureHypothesis {
            tests_present: false,
            test_dirs: Vec::new(),
            framework: TestFramework::NoneDetected,
            imports_project: false,
        };
    }

    let pytest_config = tree.is_file("pytest.ini")
        || tree.files().any(|f| file_name(f) == "conftest.py")
        || peek_contains(tree, "pyproject.toml", "[tool.pytest")
        || peek_contains(tree, "setup.cfg", "[tool:pytest]")
        || peek_contains(tree, "tox.ini", "[pytest]");

    let (src, flat) = top_level_packages(tree);
    let packages: BTreeSet<String> = src.into_iter().chain(flat).map(|(name, _)| name).collect();

    let mut uses_pytest = false;
    let mut uses_unittest = false;
    let mut imports_project = false;
    for f in &test_files {
        let Some(text) = tree.peek(f) else { continue };
        let roots = imported_roots(&text);
        uses_pytest |= roots.contains("pytest");
        uses_unittest |= roots.contains("unittest") || text.contains("unittest.TestCase");
        imports_project |= roots.iter().any(|r| packages.contains(r));
    }
    let framework = if uses_unittest && !uses_pytest && !pytest_config {
        TestFramework::Unittest
    } else {
        TestFramework::Pytest
    };
    TestStructureHypothesis { tests_present: true, test_dirs: dirs.into_iter().collect(), framework, imports_project }
}

fn peek_contains(tree: &RepoTree, path: &str, needle: &str) -> bool {
    tree.is_file(path) && tree.peek(path).map_or(false, |t| t.contains(needle))
}

pub fn extract_prior(tree: &RepoTree) -> PriorSummary {
    PriorSummary {
        dependency: detect_dependency_strategy(tree),
        importability: assess_importability(tree),
        tests: hypothesize_test_structure(tree),
    }
}

fn list_capped(items: &[String], budget: usize) -> String {
    if items.is_empty() {
        return "-".into();
    }
    let mut out = String::new();
    for (i, item) in items.iter().enumerate() {
        let sep = if i == 0 { "" } else { ", " };
        let more = format!(" (+{} more)", items.len() - i);
        if out.len() + sep.len() + item.len() + more.len() > budget {
            out.push_str(&more);
            return out;
        }
        out.push_str(sep);
        out.push_str(item);
    }
    out
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Renders the summary as a short prompt block, one line per component.
pub fn render_prior_prompt(summary: &PriorSummary) -> String {
    let d = &summary.dependency;
    let i = &summary.importability;
    let t = &summary.tests;
    let text = format!(
        "Repository prior:\n\
         dependency: {} | lockfile: {} | evidence: {}\n\
         importability: needs_install={} | layout: {} | evidence: {}\n\
         tests: {} | present: {} | imports_project: {} | dirs: {}\n",
        d.manager.as_str(),
        yes_no(d.lockfile_present),
        list_capped(&d.evidence, 300),
        yes_no(i.needs_install),
        i.layout.as_str(),
        list_capped(&i.evidence, 300),
        t.framework.as_str(),
        yes_no(t.tests_present),
        yes_no(t.imports_project),
        list_capped(&t.test_dirs, 300),
    );
    debug_assert!(text.chars().count() <= PROMPT_CHAR_CAP);
    text
}
