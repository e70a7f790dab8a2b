//! Chat-completion gateway: a provider trait, transcript record/replay,
//! and per-session usage accounting.

mod heuristic;
mod live;

use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use heuristic::{HeuristicProvider, VERIFY_COMMAND};
pub use live::{LiveConfig, LiveProvider};

pub const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn tag(self) -> char {
        match self {
            Role::System => 's',
            Role::User => 'u',
            Role::Assistant => 'a',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn system(content: impl Into<String>) -> Self {
        ChatTurn { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatTurn { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatTurn { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// USD per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub prompt_per_million: f64,
    pub completion_per_million: f64,
}

impl Default for PriceTable {
    /// A flat rate: about $0.16 for a 229,531-token session.
    fn default() -> Self {
        PriceTable { prompt_per_million: 0.70, completion_per_million: 0.70 }
    }
}

impl PriceTable {
    pub fn cost(&self, usage: Usage) -> f64 {
        (usage.prompt_tokens as f64 * self.prompt_per_million
            + usage.completion_tokens as f64 * self.completion_per_million)
            / 1_000_000.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
    pub cost: f64,
}

impl UsageLedger {
    pub fn record(&mut self, delta: Usage, prices: &PriceTable) {
        self.prompt_tokens += delta.prompt_tokens;
        self.completion_tokens += delta.completion_tokens;
        self.calls += 1;
        self.cost = prices.cost(self.usage());
    }

    pub fn usage(&self) -> Usage {
        Usage { prompt_tokens: self.prompt_tokens, completion_tokens: self.completion_tokens }
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Sums ledgers; cost is recomputed from the merged token counts.
    pub fn merge(&mut self, other: &UsageLedger, prices: &PriceTable) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.calls += other.calls;
        self.cost = prices.cost(self.usage());
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("provider error: {0}")]
    Provider(String),
    #[error("transcript mismatch at turn {turn}: expected {expected}, got {actual}")]
    TranscriptMismatch { turn: usize, expected: String, actual: String },
    #[error("transcript exhausted after {turns} turns")]
    TranscriptExhausted { turns: usize },
    #[error("transcript file: {0}")]
    Transcript(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub trait Provider: Send {
    fn complete(&mut self, messages: &[ChatTurn]) -> Result<(ChatTurn, Usage), LlmError>;
}

/// Role sequence plus a salted SHA-256 over roles and contents.
pub fn fingerprint(salt: &str, messages: &[ChatTurn]) -> String {
    let roles: String = messages.iter().map(|m| m.role.tag()).collect();
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    for m in messages {
        h.update([0x1f, m.role.tag() as u8, 0x1f]);
        h.update(m.content.as_bytes());
        h.update([0x1e]);
    }
    let digest = hex::encode(h.finalize());
    format!("{roles}:{}", &digest[..24])
}

/// Rough provider-independent token estimate.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub fingerprint: String,
    pub reply: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub version: u32,
    pub salt: String,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new(salt: &str) -> Self {
        Transcript { version: TRANSCRIPT_VERSION, salt: salt.to_string(), entries: Vec::new() }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        let t: Transcript = serde_json::from_str(&text)
            .map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        if t.version != TRANSCRIPT_VERSION {
            return Err(LlmError::Transcript(format!("{}: unsupported version {}", path.display(), t.version)));
        }
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcript serializes");
        s.push('\n');
        s
    }

    pub fn total_usage(&self) -> Usage {
        self.entries.iter().fold(Usage::default(), |acc, e| Usage {
            prompt_tokens: acc.prompt_tokens + e.usage.prompt_tokens,
            completion_tokens: acc.completion_tokens + e.usage.completion_tokens,
        })
    }
}

/// Serves canned replies strictly in order.
pub struct ReplayProvider {
    transcript: Transcript,
    next: usize,
}

impl ReplayProvider {
    pub fn new(transcript: Transcript) -> Self {
        ReplayProvider { transcript, next: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.next
    }
}

impl Provider for ReplayProvider {
    fn complete(&mut self, messages: &[ChatTurn]) -> Result<(ChatTurn, Usage), LlmError> {
        let turn = self.next;
        let Some(entry) = self.transcript.entries.get(turn) else {
            return Err(LlmError::TranscriptExhausted { turns: turn });
        };
        let actual = fingerprint(&self.transcript.salt, messages);
        if actual != entry.fingerprint {
            return Err(LlmError::TranscriptMismatch { turn, expected: entry.fingerprint.clone(), actual });
        }
        self.next += 1;
        Ok((ChatTurn::assistant(entry.reply.clone()), entry.usage))
    }
}

/// Wraps a provider and keeps every exchange for later replay.
pub struct RecordingProvider {
    inner: Box<dyn Provider>,
    log: Arc<Mutex<Transcript>>,
}

impl RecordingProvider {
    pub fn new(inner: Box<dyn Provider>, salt: &str) -> Self {
        RecordingProvider { inner, log: Arc::new(Mutex::new(Transcript::new(salt))) }
    }

    /// Shared handle to the transcript being recorded.
    pub fn handle(&self) -> Arc<Mutex<Transcript>> {
        Arc::clone(&self.log)
    }
}

impl Provider for RecordingProvider {
    fn complete(&mut self, messages: &[ChatTurn]) -> Result<(ChatTurn, Usage), LlmError> {
        let (reply, usage) = self.inner.complete(messages)?;
        let mut log = self.log.lock().expect("recording lock");
        let fp = fingerprint(&log.salt, messages);
        log.entries.push(TranscriptEntry { fingerprint: fp, reply: reply.content.clone(), usage });
        Ok((reply, usage))
    }
}

/// A provider plus the session's usage ledger.
pub struct Gateway {
    provider: Box<dyn Provider>,
    prices: PriceTable,
    ledger: UsageLedger,
}

impl Gateway {
    pub fn new(provider: Box<dyn Provider>, prices: PriceTable) -> Self {
        Gateway { provider, prices, ledger: UsageLedger::default() }
    }

    pub fn complete(&mut self, messages: &[ChatTurn]) -> Result<ChatTurn, LlmError> {
        match messages.first() {
            None => return Err(LlmError::InvalidRequest("no messages".into())),
            Some(m) if m.role != Role::System => {
                return Err(LlmError::InvalidRequest("first turn must be a system turn".into()))
            }
            _ => {}
        }
        let (reply, usage) = self.provider.complete(messages)?;
        self.ledger.record(usage, &self.prices);
        if reply.content.trim().is_empty() {
            return Err(LlmError::Provider("empty assistant reply".into()));
        }
        Ok(reply)
    }

    pub fn report_usage(&self) -> UsageLedger {
        self.ledger.clone()
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<(String, Usage)>);

    impl Provider for Fixed {
        fn complete(&mut self, _: &[ChatTurn]) -> Result<(ChatTurn, Usage), LlmError> {
            let (r, u) = self.0.remove(0);
            Ok((ChatTurn::assistant(r), u))
        }
    }

    fn msgs(text: &str) -> Vec<ChatTurn> {
        vec![ChatTurn::system("sys"), ChatTurn::user(text)]
    }

    #[test]
    fn ledger_is_additive() {
        let mut g = Gateway::new(
            Box::new(Fixed(vec![
                ("a".into(), Usage { prompt_tokens: 100, completion_tokens: 50 }),
                ("b".into(), Usage { prompt_tokens: 200, completion_tokens: 70 }),
            ])),
            PriceTable::default(),
        );
        assert_eq!(g.report_usage(), UsageLedger::default());
        g.complete(&msgs("x")).unwrap();
        g.complete(&msgs("y")).unwrap();
        let l = g.report_usage();
        assert_eq!((l.prompt_tokens, l.completion_tokens, l.calls), (300, 120, 2));
    }

    #[test]
    fn table_six_cost() {
        let usage = Usage { prompt_tokens: 229_531, completion_tokens: 0 };
        let cost = PriceTable::default().cost(usage);
        assert!((cost - 0.16).abs() <= 0.005, "{cost}");
        // the split between prompt and completion does not matter under a flat rate
        let split = Usage { prompt_tokens: 200_000, completion_tokens: 29_531 };
        assert!((PriceTable::default().cost(split) - cost).abs() < 1e-12);
    }

    #[test]
    fn replay_and_mismatch() {
        let mut rec = RecordingProvider::new(
            Box::new(Fixed(vec![("one".into(), Usage::default()), ("two".into(), Usage::default())])),
            "salt",
        );
        let h = rec.handle();
        rec.complete(&msgs("first")).unwrap();
        rec.complete(&msgs("second")).unwrap();
        let t = h.lock().unwrap().clone();

        let mut ok = ReplayProvider::new(t.clone());
        assert_eq!(ok.complete(&msgs("first")).unwrap().0.content, "one");
        assert_eq!(ok.complete(&msgs("second")).unwrap().0.content, "two");
        assert!(matches!(ok.complete(&msgs("third")), Err(LlmError::TranscriptExhausted { turns: 2 })));

        let mut bad = ReplayProvider::new(t);
        bad.complete(&msgs("first")).unwrap();
        match bad.complete(&msgs("second ")) {
            Err(LlmError::TranscriptMismatch { turn, .. }) => assert_eq!(turn, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fingerprint_depends_on_roles_salt_and_content() {
        let a = fingerprint("s", &msgs("x"));
        assert!(a.starts_with("su:"));
        assert_ne!(a, fingerprint("t", &msgs("x")));
        assert_ne!(a, fingerprint("s", &msgs("x ")));
        let swapped = vec![ChatTurn::system("sys"), ChatTurn::assistant("x")];
        assert_ne!(a, fingerprint("s", &swapped));
    }

    #[test]
    fn gateway_rejects_bad_requests() {
        let mut g = Gateway::new(Box::new(Fixed(vec![])), PriceTable::default());
        assert!(matches!(g.complete(&[]), Err(LlmError::InvalidRequest(_))));
        assert!(matches!(g.complete(&[ChatTurn::user("x")]), Err(LlmError::InvalidRequest(_))));
        assert_eq!(g.report_usage().calls, 0);
    }
}
