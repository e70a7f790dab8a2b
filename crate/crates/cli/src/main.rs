mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use evoconfig_core::agent::{read_log, run_session, SessionConfig, SessionOutcome, SessionStatus, Variant};
use evoconfig_core::dockerfile::{consolidate, provenance_json, verify_build, DockerfileConfig};
use evoconfig_core::eval::{load_corpus_config, report_text, run_corpus, CorpusConfig, EvalError, ProviderMode, CORPUS_CONFIG_FILE};
use evoconfig_core::expert::RuleSet;
use evoconfig_core::llm::{HeuristicProvider, LiveProvider, Provider, ReplayProvider, Transcript};
use evoconfig_core::sandbox::{ContainerSandbox, DockerCli, Sandbox, SandboxError, SimSandbox};

use config::{BackendChoice, CliConfig, ProviderKind};

const EXIT_UNSOLVED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;

/// An error that maps to a specific exit status.
#[derive(Debug)]
struct Fail(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail(EXIT_CONFIG, e.into())
    }
}

fn backend(e: impl Into<anyhow::Error>) -> Fail {
    Fail(EXIT_BACKEND, e.into())
}

#[derive(Parser, Debug)]
#[command(name = "evoconfig", version, about = "Configure runnable build environments for Python repositories")]
struct Cli {
    /// TOML config file; EVOCONFIG_* variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct SessionFlags {
    /// Round budget.
    #[arg(long)]
    t_max: Option<u32>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    /// Leave the repository prior out of the agent's context.
    #[arg(long)]
    no_prior: bool,
    /// Replace the expert with an exit-code-only classifier.
    #[arg(long, conflicts_with = "no_prior")]
    ablate_diagnosis: bool,
}

impl SessionFlags {
    fn variant(&self) -> Variant {
        if self.ablate_diagnosis {
            Variant::AblateDiagnosis
        } else if self.no_prior {
            Variant::NoPrior
        } else {
            Variant::Full
        }
    }

    fn apply(&self, s: &mut SessionConfig) -> Result<()> {
        if let Some(t) = self.t_max {
            s.t_max = t;
        }
        if let Some(b) = self.time_budget {
            s.wall_clock_budget_secs = b;
        }
        s.variant = self.variant();
        s.validate().map_err(|e| anyhow::anyhow!(e))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Configure one repository directory or simulator scenario.
    Configure {
        /// Repository directory, scenario file, or scenario directory.
        target: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<BackendChoice>,
        /// Replay model replies from a recorded transcript.
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[command(flatten)]
        session: SessionFlags,
        /// Output directory for the log, outcome, usage and Dockerfile.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every scenario of a corpus directory.
    Eval {
        /// Directory of scenario subdirectories, optionally with corpus.toml.
        corpus: PathBuf,
        /// Use the built-in planner instead of the recorded transcripts.
        #[arg(long)]
        heuristic: bool,
        /// Parallel sessions.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[command(flatten)]
        session: SessionFlags,
        /// Per-scenario artifacts plus report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the Dockerfile of a solved session from its trajectory log.
    Synth {
        /// trajectory.jsonl written by `configure` or `eval`.
        log: PathBuf,
        /// Directory for the Dockerfile and provenance; defaults to the log's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replay the result against this scenario.
        #[arg(long)]
        verify: Option<PathBuf>,
    },
    /// Record fresh transcripts for a corpus with the built-in planner.
    Record {
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[command(flatten)]
        session: SessionFlags,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Fail> {
    let env: BTreeMap<String, String> = std::env::vars().collect();
    let cfg = CliConfig::load(cli.config.as_deref(), &env)?;
    match cli.command {
        Command::Configure { target, backend, transcript, session, out } => {
            configure(&cfg, &env, &target, backend, transcript.as_deref(), &session, out)
        }
        Command::Eval { corpus, heuristic, workers, session, out } => {
            let mode = if heuristic { ProviderMode::Heuristic } else { ProviderMode::Replay };
            eval(&cfg, &corpus, mode, workers, &session, out.or_else(|| cfg.out_dir.clone()))
        }
        Command::Synth { log, out, verify } => synth(&cfg, &log, out, verify.as_deref()),
        Command::Record { corpus, workers, session } => eval(&cfg, &corpus, ProviderMode::Record, workers, &session, None),
    }
}

fn load_rules(cfg: &CliConfig) -> Result<RuleSet> {
    match &cfg.rules {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading rules {}", p.display()))?;
            RuleSet::from_toml(&text).with_context(|| format!("parsing rules {}", p.display()))
        }
        None => Ok(RuleSet::seed()),
    }
}

fn scenario_file(target: &Path) -> Option<PathBuf> {
    if target.is_file() {
        Some(target.to_path_buf())
    } else if target.join("scenario.json").is_file() {
        Some(target.join("scenario.json"))
    } else {
        None
    }
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn json_pretty<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

fn configure(
    cfg: &CliConfig,
    env: &BTreeMap<String, String>,
    target: &Path,
    backend_flag: Option<BackendChoice>,
    transcript: Option<&Path>,
    flags: &SessionFlags,
    out: Option<PathBuf>,
) -> Result<u8, Fail> {
    let scenario = scenario_file(target);
    let name = target.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "session".into());
    let name = if name == "scenario" {
        target.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or(name)
    } else {
        name
    };

    let mut session = cfg.session_config();
    // A scenario inside a corpus runs with the corpus settings, as under `eval`.
    if let Some(corpus) = scenario.as_deref().and_then(Path::parent).and_then(Path::parent) {
        if corpus.join(CORPUS_CONFIG_FILE).is_file() {
            let file = load_corpus_config(corpus).map_err(|e| Fail(EXIT_CONFIG, e.into()))?;
            file.apply(&name, &mut session);
        }
    }
    flags.apply(&mut session)?;
    let out = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("evoconfig-out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    session.log_path = Some(out.join("trajectory.jsonl"));
    let rules = load_rules(cfg)?;

    let provider: Box<dyn Provider> = match transcript {
        Some(p) => Box::new(ReplayProvider::new(Transcript::load(p)?)),
        None => match cfg.provider.kind {
            ProviderKind::Heuristic => Box::new(HeuristicProvider::new()),
            ProviderKind::Live => Box::new(LiveProvider::new(cfg.live_config(env))?),
        },
    };

    let choice = backend_flag.or(cfg.sandbox.backend).unwrap_or(if scenario.is_some() {
        BackendChoice::Sim
    } else {
        BackendChoice::Container
    });
    let dockerfile_cfg = DockerfileConfig { base_image: cfg.sandbox.base_image.clone(), ..DockerfileConfig::default() };
    // A fresh environment of the same kind, for replaying the Dockerfile.
    let fresh: Box<dyn Fn() -> Result<Box<dyn Sandbox>, SandboxError>>;
    let mut sandbox: Box<dyn Sandbox> = match choice {
        BackendChoice::Sim => {
            let file = scenario.ok_or_else(|| anyhow::anyhow!("{} is not a scenario file or directory", target.display()))?;
            let sb = SimSandbox::from_path(&file)?;
            let sc = sb.scenario().clone();
            fresh = Box::new(move || Ok(Box::new(SimSandbox::new(sc.clone())?) as Box<dyn Sandbox>));
            Box::new(sb)
        }
        BackendChoice::Container => {
            if !target.is_dir() {
                return Err(Fail(EXIT_CONFIG, anyhow::anyhow!("{} is not a repository directory", target.display())));
            }
            let docker = DockerCli::detect(&cfg.sandbox.docker).map_err(backend)?;
            let (repo, image, test) = (target.to_path_buf(), cfg.sandbox.base_image.clone(), dockerfile_cfg.test_entry.clone());
            let d = docker.clone();
            fresh = Box::new(move || Ok(Box::new(ContainerSandbox::start(d.clone(), &repo, &image, &test)?) as Box<dyn Sandbox>));
            Box::new(ContainerSandbox::start(docker, target, &cfg.sandbox.base_image, &dockerfile_cfg.test_entry).map_err(backend)?)
        }
    };

    let outcome = run_session(&name, sandbox.as_mut(), provider, rules, &session)?;
    write(&out.join("outcome.json"), &json_pretty(&outcome))?;
    write(&out.join("usage.json"), &json_pretty(&outcome.usage))?;
    println!(
        "{}: {} after {} rounds, {:.1}s, {} tokens (${:.4})",
        outcome.name,
        outcome.status.as_str(),
        outcome.rounds_used,
        outcome.elapsed_secs,
        outcome.usage.total_tokens(),
        outcome.usage.cost
    );
    if let Some(reason) = &outcome.abort_reason {
        println!("aborted: {reason}");
    }
    if !outcome.solved() {
        return Ok(EXIT_UNSOLVED);
    }
    let artifact = consolidate(&outcome, &dockerfile_cfg).map_err(|e| Fail(EXIT_UNSOLVED, e.into()))?;
    write(&out.join("Dockerfile"), &artifact.rendered)?;
    write(&out.join("provenance.json"), &provenance_json(&artifact))?;
    let mut replay = fresh().map_err(backend)?;
    let build = verify_build(&artifact, replay.as_mut()).map_err(backend);
    replay.close();
    let build = build?;
    write(&out.join("build.log"), &build.log)?;
    println!("Dockerfile: {} (replay built={} solved={})", out.join("Dockerfile").display(), build.built, build.solved);
    Ok(if build.built && build.solved { 0 } else { EXIT_UNSOLVED })
}

fn eval(
    cfg: &CliConfig,
    corpus: &Path,
    mode: ProviderMode,
    workers: usize,
    flags: &SessionFlags,
    out: Option<PathBuf>,
) -> Result<u8, Fail> {
    if !corpus.is_dir() {
        return Err(Fail(EXIT_CONFIG, anyhow::anyhow!("{} is not a directory", corpus.display())));
    }
    let mut session = cfg.session_config();
    session.variant = flags.variant();
    let mut cc = CorpusConfig::new(session, mode);
    cc.workers = workers;
    cc.out_dir = out;
    cc.ruleset = load_rules(cfg)?;
    cc.dockerfile.base_image = cfg.sandbox.base_image.clone();
    cc.force_t_max = flags.t_max;
    cc.force_time_budget = flags.time_budget;
    let report = match run_corpus(corpus, &cc) {
        Ok(r) => r,
        Err(e @ (EvalError::CorpusEmpty(_) | EvalError::Config(_))) => return Err(Fail(EXIT_CONFIG, e.into())),
        Err(e) => return Err(Fail(EXIT_BACKEND, e.into())),
    };
    print!("{}", report_text(&report));
    for r in report.scenarios.iter().filter(|r| r.error.is_some()) {
        eprintln!("{}: {}", r.name, r.error.as_deref().unwrap_or_default());
    }
    Ok(if report.errors == 0 { 0 } else { EXIT_UNSOLVED })
}

fn synth(cfg: &CliConfig, log: &Path, out: Option<PathBuf>, verify: Option<&Path>) -> Result<u8, Fail> {
    let text = fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let logged = read_log(&text)?;
    let status = logged.status.unwrap_or(SessionStatus::Aborted);
    // consolidate only reads the status and the trajectory
    let outcome = SessionOutcome {
        name: logged.name,
        variant: logged.variant,
        status,
        rounds_used: logged.trajectory.len() as u32,
        elapsed_secs: 0.0,
        usage: Default::default(),
        prior: None,
        trajectory: logged.trajectory,
        final_ruleset: RuleSet::seed(),
        abort_reason: None,
    };
    let dockerfile_cfg = DockerfileConfig { base_image: cfg.sandbox.base_image.clone(), ..DockerfileConfig::default() };
    let artifact = consolidate(&outcome, &dockerfile_cfg).map_err(|e| Fail(EXIT_UNSOLVED, e.into()))?;
    let out = out.unwrap_or_else(|| log.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("Dockerfile"), &artifact.rendered)?;
    write(&out.join("provenance.json"), &provenance_json(&artifact))?;
    println!("wrote {} ({} RUN steps)", out.join("Dockerfile").display(), artifact.run_steps.len());
    if let Some(scenario) = verify {
        let mut sb = SimSandbox::from_path(scenario)?;
        let build = verify_build(&artifact, &mut sb).map_err(backend)?;
        print!("{}", build.log);
        if !(build.built && build.solved) {
            return Ok(EXIT_UNSOLVED);
        }
    }
    Ok(0)
}
