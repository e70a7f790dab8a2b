//! Atomic commands, per-round action sets, and the mutation classifier that
//! keeps expert diagnostic tools read-only.
//!
//! # Action grammar
//!
//! A model reply is free text with zero or more fenced blocks:
//!
//! ````text
//! <thought text>
//! ```bash
//! pip install -r requirements.txt
//! # comments are dropped
//! pip install \
//!     pytest
//! ```
//! ````
//!
//! Every non-empty, non-comment line inside a fence is one atomic command.
//! A line ending in `\` is joined with the next one. Text outside fences is
//! the round's thought. A reply with no fence must contain
//! [`TERMINATOR`]; otherwise it is malformed.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Literal token a model emits to end a round without commands.
pub const TERMINATOR: &str = "<<TERMINATE>>";

/// Default per-command timeout in seconds.
pub const DEFAULT_TIMEOUT_SECS: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    MainAgent,
    ExpertRepair,
    ExpertTool,
    DockerfileReplay,
}

#[derive(Debug, Error, PartialEq)]
pub enum CommandError {
    #[error("command is empty")]
    Empty,
    #[error("command contains a newline")]
    Multiline,
    #[error("timeout must be positive, got {0}")]
    BadTimeout(f64),
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("round must be >= 1")]
    BadRound,
}

/// A single-line shell command executed as one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCommand", into = "RawCommand")]
pub struct AtomicCommand {
    text: String,
    origin: Origin,
    timeout: f64,
}

#[derive(Serialize, Deserialize)]
struct RawCommand {
    text: String,
    origin: Origin,
    timeout: f64,
}

impl TryFrom<RawCommand> for AtomicCommand {
    type Error = CommandError;
    fn try_from(raw: RawCommand) -> Result<Self, Self::Error> {
        AtomicCommand::with_timeout(&raw.text, raw.origin, raw.timeout)
    }
}

impl From<AtomicCommand> for RawCommand {
    fn from(c: AtomicCommand) -> Self {
        RawCommand { text: c.text, origin: c.origin, timeout: c.timeout }
    }
}

impl AtomicCommand {
    pub fn new(text: &str, origin: Origin) -> Result<Self, CommandError> {
        Self::with_timeout(text, origin, DEFAULT_TIMEOUT_SECS)
    }

    pub fn with_timeout(text: &str, origin: Origin, timeout: f64) -> Result<Self, CommandError> {
        if text.contains('\n') || text.contains('\r') {
            return Err(CommandError::Multiline);
        }
        let text = text.trim();
        if text.is_empty() {
            return Err(CommandError::Empty);
        }
        if !(timeout > 0.0 && timeout.is_finite()) {
            return Err(CommandError::BadTimeout(timeout));
        }
        Ok(AtomicCommand { text: text.to_string(), origin, timeout })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn timeout(&self) -> f64 {
        self.timeout
    }

    pub fn retimed(mut self, timeout: f64) -> Result<Self, CommandError> {
        if !(timeout > 0.0 && timeout.is_finite()) {
            return Err(CommandError::BadTimeout(timeout));
        }
        self.timeout = timeout;
        Ok(self)
    }
}

impl fmt::Display for AtomicCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// The batch of commands a model emitted for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub round: u32,
    pub commands: Vec<AtomicCommand>,
    pub thought: String,
}

impl ActionSet {
    pub fn empty(round: u32) -> Self {
        ActionSet { round, commands: Vec::new(), thought: String::new() }
    }

    /// Renders back into the fenced grammar accepted by [`parse_action`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.thought.is_empty() {
            out.push_str(&self.thought);
            out.push('\n');
        }
        if self.commands.is_empty() {
            out.push_str(TERMINATOR);
            out.push('\n');
            return out;
        }
        out.push_str("```bash\n");
        for c in &self.commands {
            out.push_str(c.text());
            out.push('\n');
        }
        out.push_str("```\n");
        out
    }
}

pub fn parse_action(model_output: &str, round: u32) -> Result<ActionSet, CommandError> {
    parse_action_with_timeout(model_output, round, DEFAULT_TIMEOUT_SECS)
}

pub fn parse_action_with_timeout(
    model_output: &str,
    round: u32,
    timeout: f64,
) -> Result<ActionSet, CommandError> {
    if round == 0 {
        return Err(CommandError::BadRound);
    }
    let mut thought = Vec::new();
    let mut commands = Vec::new();
    let mut in_fence = false;
    let mut saw_fence = false;
    let mut pending = String::new();

    for line in model_output.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with("```") {
            if in_fence {
                flush_pending(&mut pending, &mut commands, timeout)?;
            }
            in_fence = !in_fence;
            saw_fence = true;
            continue;
        }
        if !in_fence {
            if trimmed != TERMINATOR {
                thought.push(line.trim_end());
            }
            continue;
        }
        if pending.is_empty() && (trimmed.is_empty() || trimmed.starts_with('#')) {
            continue;
        }
        if let Some(head) = trimmed.strip_suffix('\\') {
            pending.push_str(head.trim_end());
            pending.push(' ');
            continue;
        }
        pending.push_str(trimmed);
        flush_pending(&mut pending, &mut commands, timeout)?;
    }
    if in_fence {
        return Err(CommandError::MalformedAction("unterminated code fence".into()));
    }
    if !saw_fence && !model_output.contains(TERMINATOR) {
        return Err(CommandError::MalformedAction(
            "no fenced command block and no terminator".into(),
        ));
    }
    let thought = thought.join("\n").trim().to_string();
    Ok(ActionSet { round, commands, thought })
}

fn flush_pending(
    pending: &mut String,
    commands: &mut Vec<AtomicCommand>,
    timeout: f64,
) -> Result<(), CommandError> {
    let text = std::mem::take(pending);
    let text = text.trim();
    if !text.is_empty() {
        commands.push(AtomicCommand::with_timeout(text, Origin::MainAgent, timeout)?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandClass {
    ReadOnly,
    Mutating,
    Ambiguous,
}

/// Words whose presence anywhere marks a command as mutating.
const MUTATION_WORDS: &[&str] = &[
    "install", "uninstall", "remove", "rm", "rmdir", "mv", "cp", "mkdir", "touch", "chmod",
    "chown", "ln", "dd", "tee", "truncate", "purge", "unlink", "add", "upgrade", "update",
    "develop", "autoremove", "shred", "kill", "pkill", "reboot", "shutdown", "sync", "lock",
    "rmtree", "makedirs", "replace", "rename", "patch", "apply", "commit", "push", "reset",
    "checkout", "clone", "download", "wget", "set", "unset", "export", "sudo", "mkfs", "mount",
];

/// Words that make an otherwise read-only command ambiguous.
const AMBIGUOUS_WORDS: &[&str] = &[
    "system", "subprocess", "popen", "exec", "eval", "spawn", "write", "writelines",
    "open", "xargs", "source", "bash", "sh", "zsh", "getattr", "setattr", "delattr", "__import__",
    "importlib", "ctypes", "runpy", "compile", "builtins", "__builtins__", "copy", "copy2", "copyfile",
    "copyfileobj", "copytree", "move", "symlink", "symlink_to", "hardlink_to", "link", "link_to",
    "utime", "chdir", "mkfifo", "mknod",
];

const READ_ONLY_HEADS: &[&str] = &[
    "cat", "ls", "find", "grep", "egrep", "fgrep", "head", "tail", "which", "env", "printenv",
    "echo", "pwd", "whoami", "uname", "wc", "sort", "uniq", "file", "stat", "du", "df", "type",
    "tree", "readlink", "realpath", "dirname", "basename", "true", "nproc", "free", "id",
    "hostname", "date", "less", "more", "cut", "diff", "nvidia-smi", "lscpu",
];

/// Splits shell text into its top-level segments on `|`, `;`, `&&`, `||`.
/// Returns (segment, separator-before-it).
fn segments(text: &str) -> Vec<(String, Option<&'static str>)> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut sep: Option<&'static str> = None;
    let mut quote: Option<char> = None;
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if let Some(q) = quote {
            if c == q {
                quote = None;
            }
            cur.push(c);
            i += 1;
            continue;
        }
        let next = chars.get(i + 1).copied();
        let found: Option<(&'static str, usize)> = match (c, next) {
            ('&', Some('&')) => Some(("&&", 2)),
            ('|', Some('|')) => Some(("||", 2)),
            ('|', _) => Some(("|", 1)),
            (';', _) => Some((";", 1)),
            ('&', _) => Some(("&", 1)),
            _ => None,
        };
        match found {
            Some((s, width)) => {
                out.push((std::mem::take(&mut cur), sep));
                sep = Some(s);
                i += width;
            }
            None => {
                if c == '\'' || c == '"' {
                    quote = Some(c);
                }
                cur.push(c);
                i += 1;
            }
        }
    }
    out.push((cur, sep));
    out
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-'))
        .filter(|w| !w.is_empty())
}

fn shell_tokens(segment: &str) -> Vec<String> {
    segment
        .split_whitespace()
        .map(|t| t.trim_matches(|c| c == '\'' || c == '"').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn has_mutation_marker(text: &str) -> bool {
    if text.contains('>') || text.contains("<<") {
        return true;
    }
    if text.contains("--in-place") {
        return true;
    }
    words(text).flat_map(|w| w.split('.')).any(|w| MUTATION_WORDS.contains(&w.to_ascii_lowercase().as_str()))
}

fn segment_class(segment: &str) -> CommandClass {
    if has_mutation_marker(segment) {
        return CommandClass::Mutating;
    }
    let tokens = shell_tokens(segment);
    let Some(head) = tokens.first() else {
        return CommandClass::Ambiguous;
    };
    let head = head.rsplit('/').next().unwrap_or(head).to_string();
    let args: Vec<&str> = tokens[1..].iter().map(String::as_str).collect();

    // sed/perl -i edit in place
    if matches!(head.as_str(), "sed" | "perl") && args.iter().any(|a| a.starts_with("-i")) {
        return CommandClass::Mutating;
    }
    if head == "find"
        && args.iter().any(|a| {
            matches!(*a, "-delete" | "-exec" | "-execdir" | "-ok" | "-okdir" | "-fprint" | "-fprint0" | "-fprintf" | "-fls")
        })
    {
        return CommandClass::Ambiguous;
    }
    if !args.is_empty() && args.iter().all(|a| version_flag(&head, a)) {
        return CommandClass::ReadOnly;
    }
    if READ_ONLY_HEADS.contains(&head.as_str()) {
        return read_only_head_class(&head, &args);
    }
    let sub = args.first().copied().unwrap_or("");
    match head.as_str() {
        "pip" | "pip3" => pip_subcommand_class(&args),
        "python" | "python3" => {
            if sub == "-m" && matches!(args.get(1).copied(), Some("pip")) {
                return pip_subcommand_class(&args[2..]);
            }
            if sub == "-c" {
                let body = args[1..].join(" ");
                if words(&body).flat_map(|w| w.split('.')).any(|w| AMBIGUOUS_WORDS.contains(&w) || w.starts_with("write")) {
                    return CommandClass::Ambiguous;
                }
                return CommandClass::ReadOnly;
            }
            CommandClass::Ambiguous
        }
        "poetry" if matches!(sub, "show" | "env" | "check" | "config") => {
            if sub == "env" && args.get(1).map_or(false, |a| *a != "info" && *a != "list") {
                return CommandClass::Ambiguous;
            }
            // `poetry config KEY VALUE` writes; listing or reading one key does not
            if sub == "config" && !matches!(&args[1..], [] | ["--list"] | [_]) {
                return CommandClass::Ambiguous;
            }
            CommandClass::ReadOnly
        }
        "conda" if matches!(sub, "list" | "info") => CommandClass::ReadOnly,
        "git" if matches!(sub, "status" | "log" | "diff" | "show" | "ls-files" | "rev-parse") => {
            if args.iter().any(|a| a.starts_with("--output")) {
                return CommandClass::Mutating;
            }
            CommandClass::ReadOnly
        }
        "dpkg" if matches!(sub, "-l" | "-s" | "-L") => CommandClass::ReadOnly,
        "apt" | "apt-cache" if matches!(sub, "list" | "show" | "policy" | "search") => {
            CommandClass::ReadOnly
        }
        "command" if sub == "-v" => CommandClass::ReadOnly,
        _ => CommandClass::Ambiguous,
    }
}

/// `--version` and `-V` are universal; `-v` and `version` only where they
/// are known to print a version rather than mean "verbose" or something else.
fn version_flag(head: &str, arg: &str) -> bool {
    match arg {
        "--version" | "-V" => true,
        "-v" => matches!(head, "gcc" | "g++" | "cc" | "clang" | "node" | "npm" | "make" | "cargo" | "rustc"),
        "version" => matches!(head, "poetry" | "npm" | "go" | "conda"),
        _ => false,
    }
}

/// Read-only heads that still write with particular options.
fn read_only_head_class(head: &str, args: &[&str]) -> CommandClass {
    let positional = || args.iter().filter(|a| !a.starts_with('-'));
    let writes = match head {
        "sort" => args.iter().any(|a| a.starts_with("-o") || a.starts_with("--output")),
        "uniq" => positional().count() > 1,
        "tree" => args.iter().any(|a| a.starts_with("-o")),
        "date" => args.iter().any(|a| a.starts_with("-s") || a.starts_with("--set")),
        "hostname" => positional().count() > 0 || args.iter().any(|a| matches!(*a, "-F" | "--file" | "-b" | "--boot")),
        "file" => args.iter().any(|a| *a == "-C" || *a == "--compile"),
        _ => false,
    };
    if writes {
        return CommandClass::Mutating;
    }
    match head {
        // `env ... CMD` runs CMD
        "env" => {
            let rest: Vec<&str> =
                args.iter().copied().skip_while(|a| a.starts_with('-') || a.contains('=')).collect();
            if rest.is_empty() {
                CommandClass::ReadOnly
            } else {
                segment_class(&rest.join(" "))
            }
        }
        "nvidia-smi" => {
            let query = |a: &&str| {
                matches!(*a, "-L" | "--list-gpus" | "-q" | "--query" | "-x" | "--xml-format")
                    || ["--query-gpu", "--format", "-i", "--id", "-d", "--display"].iter().any(|p| a.starts_with(p))
            };
            if args.iter().all(|a| query(a) || !a.starts_with('-')) {
                CommandClass::ReadOnly
            } else {
                CommandClass::Ambiguous
            }
        }
        _ => CommandClass::ReadOnly,
    }
}

fn pip_subcommand_class(args: &[&str]) -> CommandClass {
    if args.iter().any(|a| a.starts_with("--log")) {
        return CommandClass::Mutating;
    }
    match args.first().copied() {
        Some("show" | "list" | "freeze" | "check" | "--version" | "-V" | "inspect" | "debug") => {
            CommandClass::ReadOnly
        }
        Some("index") if args.get(1) == Some(&"versions") => CommandClass::ReadOnly,
        Some("config") if matches!(args.get(1).copied(), Some("list" | "get" | "debug")) => {
            CommandClass::ReadOnly
        }
        _ => CommandClass::Ambiguous,
    }
}

/// Classifies a command by its effect on the environment.
pub fn classify_command(cmd: &AtomicCommand) -> CommandClass {
    classify_text(cmd.text())
}

pub fn classify_text(text: &str) -> CommandClass {
    if has_mutation_marker(text) {
        return CommandClass::Mutating;
    }
    // command and process substitution run arbitrary code inside any head
    if text.contains("$(") || text.contains('`') || text.contains("<(") {
        return CommandClass::Ambiguous;
    }
    let mut class = CommandClass::ReadOnly;
    for (seg, sep) in segments(text) {
        if seg.trim().is_empty() {
            // dangling separator such as `ls &` or `a ;`
            if sep == Some("&") || sep.is_none() {
                return CommandClass::Ambiguous;
            }
            continue;
        }
        match segment_class(&seg) {
            CommandClass::Mutating => return CommandClass::Mutating,
            CommandClass::Ambiguous => class = CommandClass::Ambiguous,
            CommandClass::ReadOnly => {}
        }
    }
    class
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    NotSingleLine,
    MutatingEffect,
    AmbiguousEffect,
    ChainedMutation,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rejection::NotSingleLine => "not_single_line",
            Rejection::MutatingEffect => "mutating_effect",
            Rejection::AmbiguousEffect => "ambiguous_effect",
            Rejection::ChainedMutation => "chained_mutation",
        };
        f.write_str(s)
    }
}

/// Accepts a diagnostic tool command only if it cannot change the
/// environment.
pub fn validate_tool_command(cmd: &AtomicCommand) -> Result<(), Rejection> {
    validate_tool_text(cmd.text())
}

pub fn validate_tool_text(text: &str) -> Result<(), Rejection> {
    if text.contains('\n') || text.contains('\r') || text.contains("<<") || text.trim().is_empty() {
        return Err(Rejection::NotSingleLine);
    }
    let segs = segments(text);
    let chained = segs.iter().any(|(_, sep)| matches!(sep, Some(";" | "&&" | "||" | "&")));
    if chained {
        // Re-group pipelines between chain operators and check each chain link.
        let mut link = String::new();
        let mut links = Vec::new();
        for (seg, sep) in segs {
            match sep {
                Some("|") => {
                    link.push('|');
                    link.push_str(&seg);
                }
                _ => {
                    if !link.is_empty() || sep.is_some() {
                        links.push(std::mem::take(&mut link));
                    }
                    link = seg;
                }
            }
        }
        links.push(link);
        for l in &links {
            match classify_text(l) {
                CommandClass::Mutating => return Err(Rejection::ChainedMutation),
                CommandClass::Ambiguous => return Err(Rejection::AmbiguousEffect),
                CommandClass::ReadOnly => {}
            }
        }
    }
    match classify_text(text) {
        CommandClass::ReadOnly => Ok(()),
        CommandClass::Mutating => Err(if chained {
            Rejection::ChainedMutation
        } else {
            Rejection::MutatingEffect
        }),
        CommandClass::Ambiguous => Err(Rejection::AmbiguousEffect),
    }
}
