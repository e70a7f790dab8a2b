//! Builds the main agent's per-round context from the prior, a compact
//! history and the latest diagnostic reports. Raw command output never
//! enters the context; long output tokens that leak into report text are
//! elided.

use std::collections::BTreeSet;

use crate::expert::{DiagnosticReport, Verdict};
use crate::llm::{estimate_tokens, ChatTurn};

use super::{TrajectoryEntry, MAIN_SYSTEM_PROMPT};

/// Tokens this long that occur in raw output are treated as output-derived.
pub const SCRUB_MIN_LEN: usize = 16;
pub const ELIDED: &str = "[elided]";
pub const NO_PRIOR: &str = "Repository prior: unavailable\n";

/// Long words of `text` and the long parts of dotted, dashed or path-like words.
fn pieces(text: &str) -> impl Iterator<Item = &str> {
    let joiner = |c: char| c == '_' || c == '-' || c == '.' || c == '/';
    text.split(move |c: char| !(c.is_alphanumeric() || joiner(c)))
        .flat_map(move |w| {
            let w = w.trim_matches(|c: char| c == '.' || c == '-' || c == '/');
            std::iter::once(w).chain(w.split(joiner).filter(move |p| p.len() < w.len()))
        })
        .filter(|p| p.chars().count() >= SCRUB_MIN_LEN)
}

/// Long tokens from every output a round produced, minus those the agent wrote itself.
pub fn output_tokens(entry: &TrajectoryEntry) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut records: Vec<&crate::sandbox::ExecutionRecord> = entry.records.iter().collect();
    records.extend(entry.repairs.iter().map(|r| &r.record));
    for report in entry.reports.iter().chain(entry.repairs.iter().map(|r| &r.report)) {
        records.extend(report.evidence.iter().map(|e| &e.record));
    }
    for r in records {
        out.extend(pieces(&r.stdout).map(str::to_string));
        out.extend(pieces(&r.stderr).map(str::to_string));
    }
    for c in &entry.action.commands {
        for p in pieces(c.text()) {
            out.remove(p);
        }
    }
    out
}

/// Replaces every occurrence of an output-derived token in `text`, longest first.
pub fn scrub(text: &str, tokens: &BTreeSet<String>) -> String {
    let mut by_len: Vec<&String> = tokens.iter().filter(|t| text.contains(t.as_str())).collect();
    if by_len.is_empty() {
        return text.to_string();
    }
    by_len.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let mut out = text.to_string();
    for t in by_len {
        out = out.replace(t.as_str(), ELIDED);
    }
    out
}

/// History lines for all earlier rounds, oldest first: `$` lines for
/// commands that succeeded in rounds still in effect, plus one summary line
/// per non-success diagnosis (rolled-back rounds included, so failures are
/// not forgotten).
pub fn history_lines(trajectory: &[TrajectoryEntry]) -> Vec<String> {
    let mut lines = Vec::new();
    for e in trajectory {
        let tokens = output_tokens(e);
        let mark = if e.rolled_back { "(rolled back) " } else { "" };
        for (i, rec) in e.records.iter().enumerate() {
            let mut push = |rec: &crate::sandbox::ExecutionRecord, report: Option<&DiagnosticReport>| {
                if rec.succeeded() && !e.rolled_back {
                    lines.push(scrub(&format!("[r{}] $ {}", e.round, rec.command.text()), &tokens));
                }
                if let Some(r) = report.filter(|r| r.verdict != Verdict::Success) {
                    lines.push(scrub(&format!("[r{}] {mark}{}", e.round, r.summary), &tokens));
                }
            };
            push(rec, e.reports.get(i));
            for rep in e.repairs.iter().filter(|r| r.for_command == i) {
                push(&rep.record, Some(&rep.report));
            }
        }
    }
    lines
}

fn render_report(out: &mut String, report: &DiagnosticReport, outcomes: &[(String, i32)], tokens: &BTreeSet<String>) {
    out.push_str(&format!("- $ {}\n", report.command.text()));
    out.push_str(&format!("  verdict: {} | error_type: {}\n", report.verdict.as_str(), report.error_type.as_str()));
    if !report.description.is_empty() {
        out.push_str(&format!("  description: {}\n", scrub(&report.description, tokens)));
    }
    if !report.repair_commands.is_empty() {
        let list: Vec<&str> = report.repair_commands.iter().map(|c| c.text()).collect();
        out.push_str(&format!("  repairs: {}\n", scrub(&list.join(" ; "), tokens)));
    }
    if !outcomes.is_empty() {
        let list: Vec<String> = outcomes.iter().map(|(c, code)| format!("{c} -> exit {code}")).collect();
        out.push_str(&format!("  repair outcomes: {}\n", scrub(&list.join(" ; "), tokens)));
    }
    for risk in &report.risk_suggestions {
        out.push_str(&format!("  risk: {}\n", scrub(risk, tokens)));
    }
}

/// The reports turn for the most recent round.
pub fn reports_text(entry: &TrajectoryEntry) -> String {
    let tokens = output_tokens(entry);
    let mut s = format!("Latest reports (round {}):\n", entry.round);
    if entry.records.is_empty() {
        s.push_str("- no commands were executed\n");
    }
    for (i, report) in entry.reports.iter().enumerate() {
        let outcomes: Vec<(String, i32)> = entry
            .repairs
            .iter()
            .filter(|r| r.for_command == i)
            .map(|r| (r.record.command.text().to_string(), r.record.exit_code))
            .collect();
        render_report(&mut s, report, &outcomes, &tokens);
    }
    if !entry.skipped.is_empty() {
        let list: Vec<&str> = entry.skipped.iter().map(|c| c.text()).collect();
        s.push_str(&format!("skipped after the failure: {}\n", list.join(" ; ")));
    }
    if entry.rolled_back {
        s.push_str("the environment was rolled back to the last good snapshot\n");
    }
    s
}

pub fn instruction_text(round: u32, t_max: u32) -> String {
    format!(
        "Round {round} of {t_max}. Using the prior, history and reports above, propose the next commands \
         in one fenced bash block, one command per line. Reply with <<TERMINATE>> instead when nothing is left to do.\n"
    )
}

pub fn context_tokens(turns: &[ChatTurn]) -> u64 {
    turns.iter().map(|t| estimate_tokens(&t.content)).sum()
}

fn clip_to_chars(text: &str, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        return text.to_string();
    }
    let mut s: String = text.chars().take(max_chars.saturating_sub(12)).collect();
    s.push_str("\n[truncated]");
    s
}

/// Assembles the round context and fits it into `budget` tokens: the oldest
/// history lines go first, then the reports turn, then the prior are clipped.
pub fn build_context(
    prior_text: &str,
    trajectory: &[TrajectoryEntry],
    round: u32,
    t_max: u32,
    budget: u64,
) -> Vec<ChatTurn> {
    let mut history = history_lines(trajectory);
    let mut prior = prior_text.to_string();
    let mut reports = trajectory.last().map(reports_text);
    let instruction = instruction_text(round, t_max);

    let assemble = |prior: &str, history: &[String], reports: &Option<String>| {
        let mut turns = vec![ChatTurn::system(MAIN_SYSTEM_PROMPT), ChatTurn::user(prior)];
        if !trajectory.is_empty() {
            let mut h = String::from("History (oldest first):\n");
            if history.is_empty() {
                h.push_str("(earlier rounds omitted)\n");
            }
            for l in history {
                h.push_str(l);
                h.push('\n');
            }
            turns.push(ChatTurn::user(h));
        }
        if let Some(r) = reports {
            turns.push(ChatTurn::user(r.clone()));
        }
        turns.push(ChatTurn::user(instruction.clone()));
        turns
    };

    let mut turns = assemble(&prior, &history, &reports);
    if context_tokens(&turns) <= budget {
        return turns;
    }
    // Drop whole history lines until the context fits.
    let mut size = context_tokens(&turns);
    let mut drop = 0;
    while size > budget && drop < history.len() {
        size -= estimate_tokens(&history[drop]).min(size);
        drop += 1;
    }
    history.drain(..drop);
    turns = assemble(&prior, &history, &reports);
    while context_tokens(&turns) > budget && !history.is_empty() {
        history.remove(0);
        turns = assemble(&prior, &history, &reports);
    }
    for which in 0..2 {
        let over = context_tokens(&turns).saturating_sub(budget);
        if over == 0 {
            break;
        }
        let target = if which == 0 { reports.as_mut() } else { Some(&mut prior) };
        if let Some(text) = target {
            let keep = text.chars().count().saturating_sub(over as usize * 4 + 16);
            *text = clip_to_chars(text, keep);
        }
        turns = assemble(&prior, &history, &reports);
    }
    turns
}
