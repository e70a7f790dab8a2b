//! CLI configuration: a TOML file, then `EVOCONFIG_*` environment variables,
//! then command-line flags, each layer overriding the previous one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use evoconfig_core::agent::SessionConfig;
use evoconfig_core::dockerfile::DEFAULT_BASE_IMAGE;
use evoconfig_core::llm::LiveConfig;

pub const ENV_PREFIX: &str = "EVOCONFIG_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// The built-in offline planner.
    Heuristic,
    /// An OpenAI-compatible chat-completions endpoint.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Sim,
    Container,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            kind: ProviderKind::Heuristic,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    pub t_max: u32,
    pub wall_clock_budget_secs: f64,
    pub context_token_budget: u64,
    pub per_command_timeout_secs: f64,
    pub price_prompt_per_mtok: f64,
    pub price_completion_per_mtok: f64,
}

impl Default for SessionSection {
    fn default() -> Self {
        let s = SessionConfig::default();
        SessionSection {
            t_max: s.t_max,
            wall_clock_budget_secs: s.wall_clock_budget_secs,
            context_token_budget: s.context_token_budget,
            per_command_timeout_secs: s.per_command_timeout_secs,
            price_prompt_per_mtok: s.prices.prompt_per_million,
            price_completion_per_mtok: s.prices.completion_per_million,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSection {
    /// Unset: scenario files use the simulator, directories the container backend.
    pub backend: Option<BackendChoice>,
    pub docker: String,
    pub base_image: String,
}

impl Default for SandboxSection {
    fn default() -> Self {
        SandboxSection { backend: None, docker: "docker".into(), base_image: DEFAULT_BASE_IMAGE.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub provider: ProviderSection,
    pub session: SessionSection,
    pub sandbox: SandboxSection,
    /// Seed rule store; the built-in seed rules when unset.
    pub rules: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

fn parse_env<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e| anyhow::anyhow!("{ENV_PREFIX}{key}={raw}: {e}"))
}

impl CliConfig {
    /// Loads the file (if any) and applies environment overrides from `env`.
    pub fn load(path: Option<&Path>, env: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => CliConfig::default(),
        };
        cfg.apply_env(env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_env(&mut self, env: &BTreeMap<String, String>) -> Result<()> {
        for (name, raw) in env {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            match key {
                "PROVIDER" => {
                    self.provider.kind = match raw.trim() {
                        "heuristic" => ProviderKind::Heuristic,
                        "live" => ProviderKind::Live,
                        other => bail!("{ENV_PREFIX}PROVIDER: unknown provider `{other}`"),
                    }
                }
                "BASE_URL" => self.provider.base_url = raw.clone(),
                "MODEL" => self.provider.model = raw.clone(),
                "API_KEY_ENV" => self.provider.api_key_env = raw.clone(),
                "T_MAX" => self.session.t_max = parse_env(key, raw)?,
                "TIME_BUDGET" => self.session.wall_clock_budget_secs = parse_env(key, raw)?,
                "CONTEXT_BUDGET" => self.session.context_token_budget = parse_env(key, raw)?,
                "COMMAND_TIMEOUT" => self.session.per_command_timeout_secs = parse_env(key, raw)?,
                "BACKEND" => {
                    self.sandbox.backend = Some(match raw.trim() {
                        "sim" => BackendChoice::Sim,
                        "container" => BackendChoice::Container,
                        other => bail!("{ENV_PREFIX}BACKEND: unknown backend `{other}`"),
                    })
                }
                "DOCKER" => self.sandbox.docker = raw.clone(),
                "BASE_IMAGE" => self.sandbox.base_image = raw.clone(),
                "RULES" => self.rules = Some(PathBuf::from(raw)),
                "OUT" => self.out_dir = Some(PathBuf::from(raw)),
                // the key variable named by api_key_env may itself carry the prefix
                _ if name == &self.provider.api_key_env => {}
                _ => log::warn!("ignoring unknown environment variable {name}"),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.session_config().validate().map_err(|e| anyhow::anyhow!("session: {e}"))?;
        if self.provider.kind == ProviderKind::Live && self.provider.model.trim().is_empty() {
            bail!("provider.model must be set for the live provider");
        }
        Ok(())
    }

    pub fn session_config(&self) -> SessionConfig {
        let s = &self.session;
        let mut cfg = SessionConfig {
            t_max: s.t_max,
            wall_clock_budget_secs: s.wall_clock_budget_secs,
            context_token_budget: s.context_token_budget,
            per_command_timeout_secs: s.per_command_timeout_secs,
            ..SessionConfig::default()
        };
        cfg.prices.prompt_per_million = s.price_prompt_per_mtok;
        cfg.prices.completion_per_million = s.price_completion_per_mtok;
        cfg
    }

    /// Settings for the live provider; the key is read from the named variable.
    pub fn live_config(&self, env: &BTreeMap<String, String>) -> LiveConfig {
        LiveConfig {
            base_url: self.provider.base_url.clone(),
            model: self.provider.model.clone(),
            api_key: env.get(&self.provider.api_key_env).cloned(),
            timeout_secs: self.provider.timeout_secs,
            max_retries: self.provider.max_retries,
            backoff_ms: 500,
        }
    }
}
