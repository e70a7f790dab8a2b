//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evoconfig_core::agent::context::{build_context, context_tokens};
use evoconfig_core::agent::{
    Decision, RepairEntry, SessionConfig, SessionOutcome, SessionStatus, TrajectoryEntry, Variant,
};
use evoconfig_core::command::{classify_text, validate_tool_text, ActionSet, AtomicCommand, CommandClass, Origin};
use evoconfig_core::eval::{
    display_percent, ebsr, f1, failure_table, run_corpus, CorpusConfig, CorpusReport, FailureCategory, OutcomeRecord,
    ProviderMode,
};
use evoconfig_core::expert::{
    evolve_rules, static_diagnose, DiagnosticReport, ErrorType, Evidence, Feedback, Priority, Rule, RuleCategory,
    RuleOrigin, RuleSet, Trigger, Verdict,
};
use evoconfig_core::sandbox::{ExecutionRecord, Sandbox, SimSandbox, SimScenario};

type Check = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    ensure(elapsed < Duration::from_secs(limit_secs), || format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()))
}

fn replay_config(variant: Variant, out: Option<&Path>) -> CorpusConfig {
    let mut cfg = CorpusConfig::new(SessionConfig { variant, ..SessionConfig::default() }, ProviderMode::Replay);
    cfg.out_dir = out.map(Path::to_path_buf);
    cfg
}

/// Percent with one decimal, rounded half up, in integer arithmetic.
fn tenths_of_percent(num: u64, den: u64) -> u64 {
    (2000 * num + den) / (2 * den)
}

fn tenths(x: f64) -> u64 {
    (x * 10.0).round() as u64
}

fn criterion_1() -> Check {
    let start = Instant::now();
    // (successes, total, published percentage)
    for (ok, total, published) in [(370u64, 420u64, "88.1"), (253, 324, "78.1")] {
        let records: Vec<OutcomeRecord> = (0..total)
            .map(|i| OutcomeRecord {
                repo_id: format!("r{i}"),
                dockerfile_built: true,
                environment_built: i < ok,
                failure_category: None,
            })
            .collect();
        let shown = display_percent(ebsr(&records).map_err(|e| e.to_string())?);
        let oracle = tenths_of_percent(ok, total);
        ensure(shown == published, || format!("ebsr {ok}/{total} printed {shown}, expected {published}"))?;
        ensure(format!("{}.{}", oracle / 10, oracle % 10) == published, || format!("oracle disagrees for {ok}/{total}"))?;
    }

    let f = f1(0.523, 0.779) * 100.0;
    ensure((f - 62.6).abs() <= 0.05, || format!("f1(52.3, 77.9) = {f:.3}"))?;

    let counts = [23usize, 20, 10, 5, 13];
    let published = [32.4, 28.2, 14.1, 7.0, 18.3];
    let mut cats = Vec::new();
    for (c, n) in FailureCategory::ALL.iter().zip(counts) {
        cats.extend(std::iter::repeat(*c).take(n));
    }
    let table = failure_table(&cats);
    for (i, (row, want)) in table.iter().zip(published).enumerate() {
        ensure(row.count == counts[i], || format!("row {i} count {}", row.count))?;
        ensure((row.percent - want).abs() <= 0.05, || format!("row {i}: {:.2} vs {want}", row.percent))?;
        ensure(tenths_of_percent(counts[i] as u64, 71) == tenths(want), || format!("oracle disagrees on row {i}"))?;
    }
    within(start.elapsed(), 1)?;
    Ok(format!("ebsr 88.1/78.1, f1 {f:.2}, failure table of 71 matches, {:.3}s", start.elapsed().as_secs_f64()))
}

struct Golden {
    report: CorpusReport,
    out: tempfile::TempDir,
    elapsed: Duration,
}

fn run_golden() -> Result<Golden, String> {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let report = run_corpus(&fixtures().join("corpus"), &replay_config(Variant::Full, Some(out.path())))
        .map_err(|e| e.to_string())?;
    Ok(Golden { report, out, elapsed: start.elapsed() })
}

fn golden_scenarios() -> Result<Vec<(String, PathBuf)>, String> {
    let dir = fixtures().join("corpus");
    let mut v: Vec<(String, PathBuf)> = std::fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join("scenario.json").is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    v.sort();
    Ok(v)
}

fn criterion_2(g: &Golden) -> Check {
    within(g.elapsed, 60)?;
    let scenarios = golden_scenarios()?;
    ensure(scenarios.len() >= 20, || format!("only {} scenarios", scenarios.len()))?;
    let mut fault_types = std::collections::BTreeSet::new();
    let mut clean = 0;
    for (name, dir) in &scenarios {
        ensure(dir.join("transcript.json").is_file(), || format!("{name} has no transcript"))?;
        let sc = SimScenario::load(&dir.join("scenario.json")).map_err(|e| e.to_string())?;
        if sc.faults.is_empty() && !sc.solution.is_empty() {
            clean += 1;
        }
        fault_types.extend(sc.faults.iter().map(|f| f.error_type));
    }
    for t in [ErrorType::DependencyConflict, ErrorType::MissingDependency, ErrorType::ToolchainMismatch, ErrorType::Timeout] {
        ensure(fault_types.contains(&t), || format!("no scenario with a {} fault", t.as_str()))?;
    }
    ensure(clean > 0, || "no clean scenario".to_string())?;

    let r = &g.report;
    ensure(r.errors == 0, || format!("{} scenarios errored", r.errors))?;
    let solvable: Vec<_> = r.scenarios.iter().filter(|s| s.expected_status.unwrap_or(SessionStatus::Solved) == SessionStatus::Solved).collect();
    let unsolvable: Vec<_> = r.scenarios.iter().filter(|s| s.expected_status.is_some_and(|e| e != SessionStatus::Solved)).collect();
    ensure(solvable.len() == 16 && unsolvable.len() == 4, || format!("{} solvable, {} unsolvable", solvable.len(), unsolvable.len()))?;
    for s in &solvable {
        ensure(s.status == Some(SessionStatus::Solved), || format!("{} ended {:?}", s.name, s.status))?;
    }
    for s in &unsolvable {
        ensure(
            matches!(s.status, Some(SessionStatus::BudgetExhausted | SessionStatus::TimeExhausted)) && s.status == s.expected_status,
            || format!("{} ended {:?}, expected {:?}", s.name, s.status, s.expected_status),
        )?;
    }
    Ok(format!(
        "{} scenarios, {}/16 solvable solved, 4 unsolvable report exhaustion, {:.1}s",
        r.scenarios.len(),
        solvable.len(),
        g.elapsed.as_secs_f64()
    ))
}

/// Builds the RUN steps of a Dockerfile on a fresh simulator, the way `docker build` would.
fn replay_dockerfile(text: &str, scenario: &Path) -> Result<(bool, bool), String> {
    let mut sb = SimSandbox::from_path(scenario).map_err(|e| e.to_string())?;
    for line in text.lines() {
        let Some(step) = line.strip_prefix("RUN ") else { continue };
        let cmd = AtomicCommand::with_timeout(step, Origin::DockerfileReplay, 6.0 * 3600.0).map_err(|e| e.to_string())?;
        let rec = sb.execute(&cmd).map_err(|e| e.to_string())?;
        if !rec.succeeded() {
            return Ok((false, false));
        }
    }
    let solved = sb.check_solved().map_err(|e| e.to_string())?;
    Ok((true, solved))
}

fn criterion_3(g: &Golden) -> Check {
    let mut n = 0;
    for s in g.report.scenarios.iter().filter(|s| s.status == Some(SessionStatus::Solved)) {
        let path = g.out.path().join(&s.name).join("Dockerfile");
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let build = s.build.as_ref().ok_or_else(|| format!("{} has no build result", s.name))?;
        ensure(build.built && build.solved, || format!("{}: built={} solved={}", s.name, build.built, build.solved))?;
        let scenario = fixtures().join("corpus").join(&s.name).join("scenario.json");
        let (built, solved) = replay_dockerfile(&text, &scenario)?;
        ensure(built && solved, || format!("{}: independent replay built={built} solved={solved}", s.name))?;
        n += 1;
    }
    ensure(n == 16, || format!("only {n} solved Dockerfiles"))?;
    Ok(format!("{n} Dockerfiles rebuild and pass on a fresh sandbox"))
}

fn criterion_4() -> Check {
    let dir = fixtures().join("ablation");
    let mut runs = BTreeMap::new();
    for v in [Variant::Full, Variant::NoPrior, Variant::AblateDiagnosis] {
        let r = run_corpus(&dir, &replay_config(v, None)).map_err(|e| e.to_string())?;
        ensure(r.errors == 0 && r.scenarios.len() == 10, || format!("{v:?}: {} scenarios, {} errors", r.scenarios.len(), r.errors))?;
        let mean = r.scenarios.iter().map(|s| s.rounds_used as f64).sum::<f64>() / r.scenarios.len() as f64;
        runs.insert(format!("{v:?}"), (r.solved, mean));
    }
    let (full, full_rounds) = runs["Full"];
    let (np, np_rounds) = runs["NoPrior"];
    let (ad, _) = runs["AblateDiagnosis"];
    ensure(ad < full, || format!("ablate-diagnosis solved {ad}, full {full}"))?;
    ensure(np <= full, || format!("no-prior solved {np}, full {full}"))?;
    ensure(np_rounds >= full_rounds + 1.0, || format!("mean rounds no-prior {np_rounds:.2}, full {full_rounds:.2}"))?;
    Ok(format!(
        "full {full}/10 ({full_rounds:.1} rounds), no-prior {np}/10 ({np_rounds:.1} rounds), ablate-diagnosis {ad}/10"
    ))
}

const READ_ONLY: &[&str] = &[
    "cat setup.py",
    "ls -la",
    "grep -rn numpy .",
    "pip show numpy",
    "pip list",
    "pip index versions numpy",
    "find . -maxdepth 2 -name '*.py'",
    "head -n 5 requirements.txt",
    "which gcc",
    "git status",
    "python -c \"import sys; print(sys.path)\"",
    "echo ok",
];

const MUTATING: &[&str] = &[
    "pip install numpy",
    "pip uninstall -y numpy",
    "python -m pip install -e .",
    "pip3 install --upgrade pip",
    "rm -rf build",
    "mv a b",
    "cp a b",
    "mkdir out",
    "touch x",
    "chmod +x run.sh",
    "chown root x",
    "ln -s a b",
    "rmdir d",
    "unlink f",
    "truncate -s 0 f",
    "dd if=/dev/zero of=f",
    "tee out.txt",
    "apt-get install -y gcc",
    "apt-get remove -y gcc",
    "apt update",
    "conda install numpy",
    "conda create -n x python",
    "poetry add requests",
    "poetry install",
    "poetry lock",
    "poetry config virtualenvs.in-project true",
    "npm install",
    "git checkout main",
    "git reset --hard",
    "git clean -fdx",
    "git apply p.diff",
    "sed -i s/a/b/ setup.py",
    "perl -pi -e s/a/b/ f",
    "curl -o f http://example.invalid/x",
    "wget http://example.invalid/x",
    "python setup.py install",
    "python setup.py develop",
    "python -m venv .venv",
    "pip download numpy",
    "pip wheel .",
    "pip cache purge",
    "pip list --log pip.log",
    "make install",
    "cargo build",
    "kill -9 1",
    "pkill python",
    "export PATH=/x",
    "unset PYTHONPATH",
    "cd /tmp",
    "source venv/bin/activate",
    "sudo ls",
    "python -c \"import os; os.remove('f')\"",
    "python -c \"import shutil; shutil.rmtree('d')\"",
    "python -c \"open('f','w').write('x')\"",
    "python -c \"import pathlib; pathlib.Path('f').write_text('x')\"",
    "python -c \"import os; os.makedirs('d')\"",
    "python -c \"import os; os.system('rm f')\"",
    "find . -name '*.pyc' -delete",
    "find . -exec rm {} +",
    "echo x > f",
    "echo x >> f",
    "cat a 2> err.log",
    "ls -la > listing.txt",
    "sort -o out.txt in.txt",
    "uniq in.txt out.txt",
    "date -s 2020-01-01",
    "hostname newbox",
    "git diff --output=d.patch",
    "env X=1 pip install numpy",
    "env X=1 python -c \"open('f','w')\"",
    "xargs rm",
    "bash -c 'touch f'",
    "sh -c 'rm x'",
];

/// Wraps a mutating command in a random shell shape.
fn mutation_candidate(rng: &mut ChaCha8Rng) -> String {
    let ro = *READ_ONLY.choose(rng).unwrap();
    let m = *MUTATING.choose(rng).unwrap();
    let sep = *[";", " ;", "&&", " && ", "||", "|", " | ", "&"].choose(rng).unwrap();
    match rng.gen_range(0..10) {
        0 => m.to_string(),
        1 => format!("{ro}{sep}{m}"),
        2 => format!("{m}{sep}{ro}"),
        3 => format!("echo $({m})"),
        4 => format!("{ro} `{m}`"),
        5 => format!("{ro} | xargs {m}"),
        6 => {
            // break up the head with empty quotes: r''m
            let (head, rest) = m.split_once(' ').unwrap_or((m, ""));
            let cut = rng.gen_range(1..=head.len().max(1)).min(head.len());
            format!("{}''{} {rest}", &head[..cut], &head[cut..])
        }
        7 => format!("/usr/bin/{m}"),
        8 => m.split(' ').collect::<Vec<_>>().join(if rng.gen_bool(0.5) { "  " } else { "\t" }),
        _ => format!("{ro}{sep}{ro}{sep}{m}"),
    }
}

fn criterion_5(g: &Golden) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5afe);
    let mut accepted = Vec::new();
    for _ in 0..10_000 {
        let c = mutation_candidate(&mut rng);
        if validate_tool_text(&c).is_ok() {
            accepted.push(c);
        }
    }
    let fuzz = start.elapsed();
    within(fuzz, 10)?;
    ensure(accepted.is_empty(), || format!("{} accepted, e.g. `{}`", accepted.len(), accepted[0]))?;

    let mut evidence = 0;
    for s in &g.report.scenarios {
        let path = g.out.path().join(&s.name).join("outcome.json");
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let outcome: SessionOutcome = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", s.name))?;
        for report in outcome.trajectory.iter().flat_map(|e| e.all_reports()) {
            for ev in &report.evidence {
                let t = ev.tool_command.text();
                ensure(classify_text(t) == CommandClass::ReadOnly && validate_tool_text(t).is_ok(), || {
                    format!("{}: mutating evidence command `{t}`", s.name)
                })?;
                evidence += 1;
            }
        }
    }
    ensure(evidence > 0, || "no evidence commands in the corpus".to_string())?;
    Ok(format!("0/10000 mutating candidates accepted, {evidence} evidence commands all read-only, fuzz {:.2}s", fuzz.as_secs_f64()))
}

const GENERIC: &[&str] = &[
    "pip install pytest",
    "pip install requests",
    "pip install -e .",
    "pip install -r requirements.txt",
    "pip list",
    "python -m pytest --collect-only -q",
    "ls",
    "cat setup.py",
    "rm -rf build",
    "mkdir build",
    "pip uninstall -y pytest",
    "false",
];

fn criterion_6() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e);
    let mut pairs = 0;
    for (name, dir) in golden_scenarios()? {
        let path = dir.join("scenario.json");
        let scenario = SimScenario::load(&path).map_err(|e| e.to_string())?;
        let mut pool: Vec<String> = scenario.solution.clone();
        pool.extend(GENERIC.iter().map(|s| s.to_string()));
        let cmds: Vec<AtomicCommand> =
            pool.iter().map(|t| AtomicCommand::new(t, Origin::MainAgent)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let fresh = SimSandbox::new(scenario).map_err(|e| e.to_string())?;
        let pick = |rng: &mut ChaCha8Rng, max: usize| -> Vec<AtomicCommand> {
            let n = rng.gen_range(0..=max);
            (0..n).map(|_| cmds.choose(rng).unwrap().clone()).collect()
        };
        for _ in 0..200 {
            let (p, detour, s) = (pick(&mut rng, 6), pick(&mut rng, 4), pick(&mut rng, 6));
            let run = |sb: &mut SimSandbox, seq: &[AtomicCommand]| -> Result<Vec<ExecutionRecord>, String> {
                seq.iter().map(|c| sb.execute(c).map_err(|e| e.to_string())).collect()
            };
            let mut a = SimSandbox::new(fresh.scenario().clone()).map_err(|e| e.to_string())?;
            let mut left = run(&mut a, &p)?;
            let snap = a.snapshot().map_err(|e| e.to_string())?;
            run(&mut a, &detour)?;
            a.restore(&snap).map_err(|e| e.to_string())?;
            left.extend(run(&mut a, &s)?);

            let mut b = SimSandbox::new(fresh.scenario().clone()).map_err(|e| e.to_string())?;
            let mut right = run(&mut b, &p)?;
            right.extend(run(&mut b, &s)?);
            ensure(left == right, || format!("{name}: records diverge after restore"))?;
            let (sa, sb) = (a.check_solved().map_err(|e| e.to_string())?, b.check_solved().map_err(|e| e.to_string())?);
            ensure(sa == sb, || format!("{name}: solved state diverges after restore"))?;
            pairs += 1;
        }
    }
    within(start.elapsed(), 30)?;
    Ok(format!("{pairs} prefix/suffix pairs with a discarded detour agree, {:.1}s", start.elapsed().as_secs_f64()))
}

fn sentinel(rng: &mut ChaCha8Rng) -> String {
    let hex: String = (0..20).map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap()).collect();
    format!("zq{hex}")
}

/// Puts `s` inside a random bit of surrounding punctuation.
fn embed(rng: &mut ChaCha8Rng, s: &str) -> String {
    match rng.gen_range(0..10) {
        0 => s.to_string(),
        1 => format!("'{s}'"),
        2 => format!("({s})"),
        3 => format!("/tmp/build/{s}/setup.py"),
        4 => format!("{s}:"),
        5 => format!("key={s},"),
        6 => format!("pkg-{s}.whl"),
        7 => format!("\"{s}\"."),
        8 => format!("lib_{s}_ext"),
        _ => format!("[{s}]"),
    }
}

fn rec(rng: &mut ChaCha8Rng, text: &str, origin: Origin, secret: &str, fail: bool) -> ExecutionRecord {
    let stdout = format!("line one\nresult {}\nline three\n", embed(rng, secret));
    let stderr = if fail { format!("ERROR: could not resolve {}\n", embed(rng, secret)) } else { String::new() };
    ExecutionRecord::new(AtomicCommand::new(text, origin).unwrap(), if fail { 1 } else { 0 }, &stdout, &stderr, 1.0, false)
}

/// A diagnosis that copied raw output into every free-text field.
fn leaky_report(rng: &mut ChaCha8Rng, record: &ExecutionRecord, secret: &str, evidence: Option<ExecutionRecord>) -> DiagnosticReport {
    let mut r = static_diagnose(record);
    r.verdict = if rng.gen_bool(0.8) { Verdict::Failure } else { Verdict::PotentialRisk };
    r.error_type = ErrorType::MissingDependency;
    r.description = format!("the build needs {} first", embed(rng, secret));
    r.summary = format!("{} failed near {}", record.command.text(), embed(rng, secret));
    r.risk_suggestions.push(format!("watch {}", embed(rng, secret)));
    r.repair_commands.push(AtomicCommand::new(&format!("pip install {}", embed(rng, secret)), Origin::ExpertRepair).unwrap());
    r.repair_sources.push(None);
    if let Some(ev) = evidence {
        r.evidence.push(Evidence { tool_command: ev.command.clone(), record: ev });
    }
    r
}

/// Entries plus the sentinels planted in each round's output.
fn trajectory(rng: &mut ChaCha8Rng, rounds: u32) -> (Vec<TrajectoryEntry>, Vec<Vec<String>>) {
    let mut entries = Vec::new();
    let mut planted = Vec::new();
    for round in 1..=rounds {
        let mut secrets = Vec::new();
        let n = rng.gen_range(1..=3);
        let mut action = ActionSet::empty(round);
        let mut records = Vec::new();
        let mut reports = Vec::new();
        let mut repairs = Vec::new();
        for i in 0..n {
            let text = format!("pip install pkg{round}x{i}");
            action.commands.push(AtomicCommand::new(&text, Origin::MainAgent).unwrap());
            let (s_out, s_tool, s_rep) = (sentinel(rng), sentinel(rng), sentinel(rng));
            secrets.extend([s_out.clone(), s_tool.clone(), s_rep.clone()]);
            let fail = rng.gen_bool(0.6);
            let r = rec(rng, &text, Origin::MainAgent, &s_out, fail);
            let tool = rec(rng, "pip index versions pkg", Origin::ExpertTool, &s_tool, false);
            let leak = format!("{s_out} {s_tool}");
            reports.push(leaky_report(rng, &r, &leak, Some(tool)));
            records.push(r);
            if fail && rng.gen_bool(0.5) {
                let repair_fails = rng.gen_bool(0.5);
                let rr = rec(rng, &format!("pip install pkg{round}x{i} --user"), Origin::ExpertRepair, &s_rep, repair_fails);
                let report = leaky_report(rng, &rr, &s_rep, None);
                repairs.push(RepairEntry { for_command: i, record: rr, report });
            }
        }
        entries.push(TrajectoryEntry {
            round,
            action,
            records,
            reports,
            repairs,
            skipped: Vec::new(),
            decision: if rng.gen_bool(0.5) { Decision::Repaired } else { Decision::Continue },
            snapshot: None,
            rolled_back: rng.gen_bool(0.15),
            context_tokens: 0,
            ruleset_revision: 0,
        });
        planted.push(secrets);
    }
    (entries, planted)
}

fn criterion_7() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let prior = "Repository prior:\n- dependency manager: pip_requirements (requirements.txt)\n- tests: present\n";
    let floor = context_tokens(&build_context(prior, &[], 1, 50, u64::MAX));
    let mut checked = 0;
    for _ in 0..8 {
        let (traj, secrets) = trajectory(&mut rng, 50);
        let budget = rng.gen_range(floor + 200..=floor + 4000);
        for n in 2..=50u32 {
            let turns = build_context(prior, &traj[..(n - 1) as usize], n, 50, budget);
            let size = context_tokens(&turns);
            ensure(size <= budget, || format!("round {n}: {size} tokens over budget {budget}"))?;
            let text: String = turns.iter().map(|t| t.content.as_str()).collect::<Vec<_>>().join("\n");
            if let Some(s) = secrets[..(n - 1) as usize].iter().flatten().find(|s| text.contains(s.as_str())) {
                return Err(format!("round {n}: sentinel {s} leaked"));
            }
            checked += 1;
        }
    }
    within(start.elapsed(), 10)?;
    Ok(format!("{checked} round contexts free of earlier output, all within budget, {:.1}s", start.elapsed().as_secs_f64()))
}

fn seed_rules(rng: &mut ChaCha8Rng, n: usize) -> Vec<Rule> {
    let cats = [RuleCategory::RepairSuggestion, RuleCategory::ToolCreation, RuleCategory::RiskAssessment];
    (0..n)
        .map(|i| Rule {
            id: format!("r{i}"),
            category: cats[i % 3],
            trigger: Trigger { output: Some(format!("err{i}")), ..Trigger::default() },
            effect: "pip install x".into(),
            priority: Priority::from_milli(rng.gen_range(0..=1000)).unwrap(),
            origin: RuleOrigin::Seed,
            seq: 0,
        })
        .collect()
}

fn random_report(rng: &mut ChaCha8Rng, ids: &[String]) -> DiagnosticReport {
    let cmd = AtomicCommand::new("pip install thing", Origin::MainAgent).unwrap();
    let rec = ExecutionRecord::new(cmd, 1, "", &format!("ERROR: oops {}", rng.gen_range(0..50)), 1.0, false);
    let mut r = static_diagnose(&rec);
    let pick = |rng: &mut ChaCha8Rng| ids.choose(rng).cloned();
    r.verdict = *[Verdict::Failure, Verdict::PotentialRisk, Verdict::Success].choose(rng).unwrap();
    for _ in 0..rng.gen_range(0..3) {
        r.repair_commands.push(AtomicCommand::new(&format!("pip install fix{}", rng.gen_range(0..30)), Origin::ExpertRepair).unwrap());
        r.repair_sources.push(if rng.gen_bool(0.6) { pick(rng) } else { None });
    }
    r.tool_rules = (0..rng.gen_range(0..3)).filter_map(|_| pick(rng)).collect();
    r.risk_rules = (0..rng.gen_range(0..3)).filter_map(|_| pick(rng)).collect();
    r.signature = rng.gen_bool(0.7).then(|| format!("ERROR: oops {}", rng.gen_range(0..50)));
    r
}

fn random_feedback(rng: &mut ChaCha8Rng, report: &DiagnosticReport) -> Feedback {
    let k = report.repair_commands.len().max(1);
    match rng.gen_range(0..5) {
        0 => Feedback::RepairSucceeded { repair: rng.gen_range(0..k) },
        1 => Feedback::RepairFailed { repair: rng.gen_range(0..k) },
        2 => Feedback::RiskConfirmed,
        3 => Feedback::RiskUnfounded,
        _ => Feedback::None,
    }
}

fn criterion_8() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xe70);
    let mut mutations = 0;
    for seq in 0..12 {
        let cap = rng.gen_range(4..=24);
        let count = rng.gen_range(1..=cap);
        let rules = seed_rules(&mut rng, count);
        let mut ids: Vec<String> = rules.iter().map(|r| r.id.clone()).collect();
        ids.push("no-such-rule".into());
        let mut set = RuleSet::new(rules, cap).map_err(|e| e.to_string())?;
        let success_only = seq % 2 == 0;
        for step in 0..1000 {
            let report = random_report(&mut rng, &ids);
            let feedback = if success_only {
                if rng.gen_bool(0.5) {
                    Feedback::RiskConfirmed
                } else {
                    Feedback::RepairSucceeded { repair: rng.gen_range(0..report.repair_commands.len().max(1)) }
                }
            } else {
                random_feedback(&mut rng, &report)
            };
            let before: Vec<Rule> = set.rules().to_vec();
            let rev = set.revision();
            let changed = evolve_rules(&mut set, &report, feedback);
            let after = set.rules();
            let really = before.as_slice() != after;
            ensure(changed == really, || format!("seq {seq} step {step}: reported {changed}, rules changed {really}"))?;
            ensure(set.revision() == rev + u64::from(really), || format!("seq {seq} step {step}: revision {rev} -> {}", set.revision()))?;
            ensure(after.len() <= set.cap(), || format!("seq {seq}: {} rules over cap {}", after.len(), set.cap()))?;
            ensure(after.iter().all(|r| r.priority.milli() <= 1000), || format!("seq {seq}: priority out of range"))?;
            if success_only {
                for r in after {
                    if let Some(old) = before.iter().find(|b| b.id == r.id) {
                        ensure(r.priority >= old.priority, || format!("seq {seq} step {step}: {} dropped", r.id))?;
                    }
                }
            }
            mutations += u64::from(really);
        }
    }
    within(start.elapsed(), 5)?;
    Ok(format!("12 sequences of 1000 feedback events, {mutations} mutations, all laws hold, {:.1}s", start.elapsed().as_secs_f64()))
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_9(g: &Golden) -> Check {
    let second = run_golden()?;
    let (a, b) = (files(g.out.path()), files(second.out.path()));
    ensure(a == b, || "the two runs wrote different file sets".to_string())?;
    for f in &a {
        let (x, y) = (std::fs::read(g.out.path().join(f)), std::fs::read(second.out.path().join(f)));
        ensure(x.is_ok() && x.ok() == y.ok(), || format!("{} differs", f.display()))?;
    }
    for kind in ["trajectory.jsonl", "Dockerfile", "report.json"] {
        ensure(a.iter().any(|f| f.ends_with(kind)), || format!("no {kind} written"))?;
    }
    Ok(format!("{} files byte-identical across two runs", a.len()))
}

fn main() {
    let golden = run_golden();
    let with_golden = |f: fn(&Golden) -> Check| -> Check {
        match &golden {
            Ok(g) => f(g),
            Err(e) => Err(format!("golden corpus run failed: {e}")),
        }
    };
    let results: Vec<(u32, &str, Check)> = vec![
        (1, "metric arithmetic", criterion_1()),
        (2, "golden corpus", with_golden(criterion_2)),
        (3, "Dockerfile replay", with_golden(criterion_3)),
        (4, "ablation", criterion_4()),
        (5, "tool safety", with_golden(criterion_5)),
        (6, "rollback", criterion_6()),
        (7, "context hygiene", criterion_7()),
        (8, "rule evolution", criterion_8()),
        (9, "determinism", with_golden(criterion_9)),
    ];
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n} ({name}): PASS {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
