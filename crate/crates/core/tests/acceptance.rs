//! Release acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::{DateTime, Datelike, TimeZone, Timelike, Utc, Weekday};
use forge::cron::parse_cron;
use forge::daemon::{run_daemon, SimulatedClock};
use forge::delivery::{collect_artifact, upload_artifact, ArtifactKind, RetryPolicy};
use forge::dsl::{parse_pipeline, parse_pipeline_bytes, plan, validate, Mode, PlanNode, SerialStage, Severity, StepDef, TriggerDef};
use forge::executor::{
    execute_stage, satisfies_prefix_property, Engine, ExecContext, FailingStep, Promotion, RunRecord, Status, Trigger,
    WorkspaceSource,
};
use forge::fixtures::{make_fixture, FixtureConfig, FixtureRepo, Scenario, StubServer, UploadReply, KEY_PASSWORD, STORE_PASSWORD};
use forge::scm::{PollState, ScmError};
use forge::store::Store;
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const FIXTURE_STAGES: [&str; 5] = ["Settings", "Build Debug Mode", "Acceptance Test", "Build Release Mode", "Delivery"];

struct Sandbox {
    _dir: tempfile::TempDir,
    repo: FixtureRepo,
    store_dir: PathBuf,
}

fn sandbox(cfg: &FixtureConfig) -> Sandbox {
    let dir = tempfile::tempdir().expect("tempdir");
    let repo = make_fixture(&dir.path().join("app"), cfg).expect("fixture");
    let store_dir = dir.path().join("store");
    Sandbox { _dir: dir, repo, store_dir }
}

fn engine(sb: &Sandbox) -> Engine {
    let text = fs::read_to_string(sb.repo.pipelinefile()).unwrap();
    let def = parse_pipeline(&text, "Pipelinefile").unwrap();
    let store = Store::open(&sb.store_dir).unwrap();
    let mut engine = Engine::new(def, store, WorkspaceSource::Checkout { repo: sb.repo.path.clone() });
    engine.env.extend(sb.repo.signing_env());
    engine
}

fn run_engine(sb: &Sandbox) -> RunRecord {
    let e = engine(sb);
    e.execute_run(&plan(&e.def), &sb.repo.head, Trigger::Manual, &mut |_| {}).unwrap()
}

fn forge_cli(sb: &Sandbox, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_forge"))
        .arg("--file")
        .arg(sb.repo.pipelinefile())
        .arg("--store")
        .arg(&sb.store_dir)
        .args(args)
        .envs(sb.repo.signing_env())
        .output()
        .expect("spawn forge");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn top_statuses(r: &RunRecord) -> Vec<Status> {
    r.stages.iter().map(|s| s.status).collect()
}

fn end_to_end() -> Outcome {
    let stub = StubServer::start(0).map_err(|e| e.to_string())?;
    let sb = sandbox(&FixtureConfig::new(Scenario::AllPass, stub.url()));
    let started = Instant::now();
    let record = run_engine(&sb);
    let elapsed = started.elapsed();
    check!(record.status == Status::Success, "run status {} ({:?})", record.status, record.failure());
    check!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    let names: Vec<&str> = record.stages.iter().map(|s| s.name.as_str()).collect();
    check!(names == FIXTURE_STAGES, "stage order {names:?}");
    let branches: Vec<(&str, Status)> = record.stages[0].branches.iter().map(|b| (b.name.as_str(), b.status)).collect();
    check!(
        branches == [("BUNDLE INSTALL", Status::Success), ("NPM INSTALL", Status::Success)],
        "settings branches {branches:?}"
    );
    let hooks = stub.requests_to("/webhook");
    check!(hooks.len() == 1, "{} webhook posts", hooks.len());
    let text = hooks[0].body_text();
    check!(text.contains("#1") && text.contains("SUCCESS"), "webhook body {text}");
    let receipt = record.receipt.as_ref().ok_or("no receipt")?;
    let outbox = sb.store_dir.join("outbox");
    let mut files: Vec<String> = fs::read_dir(&outbox)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    check!(files == ["1-1.msg", "1-2.msg"], "outbox {files:?}");
    for f in &files {
        let body = fs::read_to_string(outbox.join(f)).unwrap();
        check!(body.contains(&receipt.download_url), "{f} lacks {}", receipt.download_url);
    }
    check!(receipt.download_url == format!("{}/d/1", stub.url()), "download url {}", receipt.download_url);
    Ok(format!("5 stages SUCCESS in {:.2}s, 1 webhook post, 2 outbox messages", elapsed.as_secs_f64()))
}

fn fail_fast() -> Outcome {
    let stub = StubServer::start(0).map_err(|e| e.to_string())?;
    let sb = sandbox(&FixtureConfig::new(Scenario::AcceptanceFail, stub.url()));
    let (code, output) = forge_cli(&sb, &["run", "--head"]);
    check!(code == 1, "exit code {code}\n{output}");
    check!(output.contains("stage \"Acceptance Test\" step 1"), "output does not locate the failure:\n{output}");
    let record = Store::open(&sb.store_dir).unwrap().load_run(1).map_err(|e| e.to_string())?;
    check!(record.status == Status::Failed, "status {}", record.status);
    let statuses = top_statuses(&record);
    let expected = [Status::Success, Status::Success, Status::Failed, Status::Skipped, Status::Skipped];
    check!(statuses == expected, "stage statuses {statuses:?}");
    check!(satisfies_prefix_property(&statuses), "prefix property violated");
    let failing = record.stages[2].failing_step.clone();
    check!(
        failing == Some(FailingStep { stage: "Acceptance Test".into(), step: 1 }),
        "failing step {failing:?}"
    );
    check!(sb.repo.executions("build_release") == 0, "release build ran");
    check!(stub.requests_to("/webhook").len() == 1, "failure not notified");
    Ok("exit 1, failing step Acceptance Test #1, later stages SKIPPED".into())
}

fn parallel() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ExecContext::new(dir.path(), dir.path().join("logs"));
    let branch = |name: &str| SerialStage { name: name.into(), steps: vec![StepDef::sh("sleep 1.0")], requires_signing: false };
    let node = PlanNode::Parallel { name: "Group".into(), branches: vec![branch("left"), branch("right")] };
    let started = Instant::now();
    let result = execute_stage(&node, &ctx);
    let elapsed = started.elapsed();
    check!(result.status == Status::Success, "group status {}", result.status);
    check!(result.branches.iter().all(|b| b.status == Status::Success), "branch statuses");
    check!(elapsed >= Duration::from_secs(1) && elapsed < Duration::from_millis(1800), "group took {elapsed:?}");
    Ok(format!("two 1.0s branches finished in {:.3}s", elapsed.as_secs_f64()))
}

/// Hand-written rule for "0 */12 * * 1-5".
fn oracle(t: DateTime<Utc>) -> bool {
    t.minute() == 0 && t.hour().is_multiple_of(12) && !matches!(t.weekday(), Weekday::Sat | Weekday::Sun)
}

fn cron_oracle() -> Outcome {
    let schedule = parse_cron("0 */12 * * 1-5").map_err(|e| e.to_string())?;
    let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let minutes = 14 * 24 * 60;
    // Oracle firing minutes, with a margin for next_after near the end.
    let firing: Vec<DateTime<Utc>> = (0..minutes + 4 * 24 * 60)
        .map(|m| start + chrono::Duration::minutes(m))
        .filter(|t| oracle(*t))
        .collect();
    let mut discrepancies = 0;
    for m in 0..minutes {
        let t = start + chrono::Duration::minutes(m);
        if schedule.matches(t) != oracle(t) {
            discrepancies += 1;
        }
        let expected = firing.iter().copied().find(|f| *f > t);
        if schedule.next_after(t).ok() != expected {
            discrepancies += 1;
        }
    }
    check!(discrepancies == 0, "{discrepancies} discrepancies");
    for week in 0..2 {
        let lo = start + chrono::Duration::days(7 * week);
        let hi = lo + chrono::Duration::days(7);
        let n = (0..7 * 24 * 60).map(|m| lo + chrono::Duration::minutes(m)).filter(|t| schedule.matches(*t)).count();
        check!(n == 10, "week {week} ({lo}..{hi}) fires {n} times");
    }
    Ok(format!("{minutes} minutes scanned, 0 discrepancies, 10 firings per week"))
}

fn simulate(seed_commit: Option<&str>, planted: Option<DateTime<Utc>>) -> Vec<DateTime<Utc>> {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let trigger = TriggerDef {
        cron_expression: "0 */12 * * 1-5".into(),
        repo: "app".into(),
        branch: "master".into(),
        head_cmd: None,
        span: Default::default(),
    };
    if let Some(c) = seed_commit {
        let mut state = PollState::new("app", "master");
        state.last_seen_commit = Some(c.into());
        store.save_poll_state(&state).unwrap();
    }
    // Sunday 00:00 through the following Sunday.
    let start = Utc.with_ymd_and_hms(2023, 12, 31, 0, 0, 0).unwrap();
    let clock = SimulatedClock::new(start, start + chrono::Duration::days(7));
    let heads = move |_: &TriggerDef, at: DateTime<Utc>| -> Result<String, ScmError> {
        Ok(if planted.is_some_and(|p| at >= p) { "c1".into() } else { "c0".into() })
    };
    let mut runs = 0;
    run_daemon(&[trigger], &store, &clock, &heads, &mut |_, _| {
        runs += 1;
        Some(runs)
    })
    .unwrap()
    .into_iter()
    .map(|f| f.at)
    .collect()
}

fn poll_semantics() -> Outcome {
    let monday = |h| Utc.with_ymd_and_hms(2024, 1, 1, h, 0, 0).unwrap();
    let planted = simulate(Some("c0"), Some(monday(10)));
    check!(planted == [monday(12)], "planted commit runs at {planted:?}");
    check!(simulate(Some("c0"), Some(monday(10))) == planted, "schedule not deterministic");
    let quiet = simulate(Some("c0"), None);
    check!(quiet.is_empty(), "no-commit week ran {} times", quiet.len());
    let bootstrap = simulate(None, None);
    check!(bootstrap == [monday(0)], "bootstrap runs at {bootstrap:?}");
    Ok("planted commit: 1 run at Mon 12:00; quiet week: 0; bootstrap: 1 at Mon 00:00".into())
}

fn delivery_vs_deployment() -> Outcome {
    let stub = StubServer::start(0).map_err(|e| e.to_string())?;
    let sb = sandbox(&FixtureConfig::new(Scenario::AllPass, stub.url()));
    let (code, output) = forge_cli(&sb, &["run"]);
    check!(code == 0, "delivery run exit {code}\n{output}");
    check!(sb.repo.executions("publish") == 0, "publish ran before promote");
    let (code, output) = forge_cli(&sb, &["promote", "1", "--by", "release-manager"]);
    check!(code == 0, "promote exit {code}\n{output}");
    check!(sb.repo.executions("publish") == 1, "publish ran {} times after promote", sb.repo.executions("publish"));
    let (code, _) = forge_cli(&sb, &["promote", "1", "--by", "release-manager"]);
    check!(code == 2, "second promote exit {code}");
    check!(sb.repo.executions("publish") == 1, "second promote re-published");
    let record = Store::open(&sb.store_dir).unwrap().load_run(1).map_err(|e| e.to_string())?;
    check!(
        matches!(&record.promotion, Promotion::Promoted { by, .. } if by == "release-manager"),
        "promotion {:?}",
        record.promotion
    );

    let mut cfg = FixtureConfig::new(Scenario::AllPass, stub.url());
    cfg.mode = Mode::Deployment;
    let sb = sandbox(&cfg);
    let (code, output) = forge_cli(&sb, &["run"]);
    check!(code == 0, "deployment run exit {code}\n{output}");
    check!(sb.repo.executions("publish") == 1, "deployment published {} times", sb.repo.executions("publish"));
    let (code, _) = forge_cli(&sb, &["promote", "1"]);
    check!(code == 2, "promote in deployment mode exit {code}");
    check!(sb.repo.executions("publish") == 1, "deployment promote re-published");
    Ok("delivery: 0 publishes before promote, 1 after, repeat exit 2; deployment: 1 publish inline".into())
}

fn signing_gate() -> Outcome {
    let stub = StubServer::start(0).map_err(|e| e.to_string())?;
    let sb = sandbox(&FixtureConfig::new(Scenario::NoSigning, stub.url()));
    let record = run_engine(&sb);
    check!(record.status == Status::Failed, "status {}", record.status);
    let release = &record.stages[3];
    check!(release.name == "Build Release Mode" && release.status == Status::Failed, "release stage {}", release.status);
    let step = release.failing_step_result().ok_or("no failing step")?;
    let reason = step.failure_reason();
    check!(reason.contains("keystore not found"), "reason {reason:?}");
    check!(sb.repo.executions("build_release") == 0, "release build ran");
    check!(record.stages[4].status == Status::Skipped, "delivery {}", record.stages[4].status);
    Ok(format!("Build Release Mode FAILED: {reason}; 0 release builds"))
}

fn upload_retry() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("app-release.apk"), b"test").unwrap();
    let artifact = collect_artifact(dir.path(), "*-release.apk", ArtifactKind::Release, "1-abc").map_err(|e| e.to_string())?;
    let policy = RetryPolicy::default();

    let stub = StubServer::start(0).map_err(|e| e.to_string())?;
    stub.script_uploads([UploadReply::Status(500), UploadReply::Status(500), UploadReply::Status(200)]);
    let receipt = upload_artifact(&artifact, &stub.upload_url(), Some("k"), &policy).map_err(|e| e.to_string())?;
    let attempts = stub.requests_to("/upload").len();
    check!(receipt.attempts == 3 && attempts == 3, "500,500,200 took {attempts} requests");

    let stub = StubServer::start(0).map_err(|e| e.to_string())?;
    stub.script_uploads([UploadReply::Status(401)]);
    let err = upload_artifact(&artifact, &stub.upload_url(), Some("k"), &policy).err().ok_or("401 succeeded")?;
    let attempts = stub.requests_to("/upload").len();
    check!(err.attempts() == 1 && attempts == 1, "401 took {attempts} requests");
    Ok("[500,500,200] -> success in 3 attempts; [401] -> failure after 1".into())
}

fn corpus(kind: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/corpus").join(kind);
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    files.sort();
    files
}

/// Parse plus validation errors, as one comparable value.
fn analyse(bytes: &[u8]) -> Result<(), Vec<String>> {
    match parse_pipeline_bytes(bytes, "Pipelinefile") {
        Err(diags) => Err(diags.iter().map(|d| d.to_string()).collect()),
        Ok(def) => {
            let errors: Vec<String> =
                validate(&def).iter().filter(|d| d.severity == Severity::Error).map(|d| d.to_string()).collect();
            let _ = plan(&def);
            if errors.is_empty() {
                Ok(())
            } else {
                Err(errors)
            }
        }
    }
}

fn parser_robustness() -> Outcome {
    let valid = corpus("valid");
    let invalid = corpus("invalid");
    check!(valid.len() >= 20 && invalid.len() >= 20, "corpus sizes {} / {}", valid.len(), invalid.len());
    for (path, bytes) in &valid {
        let first = analyse(bytes);
        check!(first.is_ok(), "{} rejected: {:?}", path.display(), first);
        check!(parse_pipeline_bytes(bytes, "P") == parse_pipeline_bytes(bytes, "P"), "{} nondeterministic", path.display());
    }
    for (path, bytes) in &invalid {
        let first = analyse(bytes);
        check!(matches!(&first, Err(d) if !d.is_empty()), "{} accepted", path.display());
        check!(analyse(bytes) == first, "{} nondeterministic", path.display());
    }

    let mut runner = TestRunner::new_with_rng(Config::default(), TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let random = proptest::collection::vec(proptest::num::u8::ANY, 0..400);
    let seeds: Vec<&Vec<u8>> = valid.iter().map(|(_, b)| b).collect();
    let cases = 12_000;
    let mut diagnosed = 0;
    for i in 0..cases {
        let mut input = random.new_tree(&mut runner).unwrap().current();
        // Every third case mutates a valid file instead of pure noise.
        if i % 3 == 0 && !input.is_empty() {
            let mut base = seeds[i % seeds.len()].clone();
            for (k, b) in input.iter().take(8).enumerate() {
                let at = (usize::from(*b) * 7919 + k * 104_729 + i) % base.len().max(1);
                if at < base.len() {
                    base[at] = input[(k + 1) % input.len()];
                }
            }
            input = base;
        }
        let outcome = std::panic::catch_unwind(|| analyse(&input));
        match outcome {
            Err(_) => return Err(format!("parser panicked on input {:?}", String::from_utf8_lossy(&input))),
            Ok(Err(diags)) if diags.is_empty() => return Err("rejected without diagnostics".into()),
            Ok(Err(_)) => diagnosed += 1,
            Ok(Ok(())) => {}
        }
    }
    Ok(format!(
        "{} valid, {} invalid, {cases} fuzz cases without a crash ({diagnosed} diagnosed)",
        valid.len(),
        invalid.len()
    ))
}

fn count(hay: &[u8], needle: &[u8]) -> usize {
    hay.windows(needle.len()).filter(|w| *w == needle).count()
}

fn secret_hygiene() -> Outcome {
    let stub = StubServer::start(0).map_err(|e| e.to_string())?;
    let sb = sandbox(&FixtureConfig::new(Scenario::AllPass, stub.url()));
    let record = run_engine(&sb);
    check!(record.status == Status::Success, "run {}", record.status);
    let mut scanned = 0;
    let mut leaks = Vec::new();
    for entry in walkdir::WalkDir::new(&sb.store_dir).into_iter().filter_map(Result::ok) {
        let path = entry.path();
        if !entry.file_type().is_file() {
            continue;
        }
        let bytes = fs::read(path).unwrap();
        scanned += 1;
        for secret in [STORE_PASSWORD, KEY_PASSWORD] {
            if count(&bytes, secret.as_bytes()) > 0 {
                leaks.push(path.display().to_string());
            }
        }
    }
    check!(leaks.is_empty(), "secrets found in {leaks:?}");
    let release_log = sb.store_dir.join("runs/1/logs/Build_Release_Mode/1.stdout.log");
    let text = fs::read_to_string(&release_log).map_err(|e| e.to_string())?;
    check!(text.contains("[REDACTED]"), "release log was not scrubbed: {text}");
    Ok(format!("{scanned} persisted files byte-scanned, 0 password occurrences"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("end-to-end mobile app run", end_to_end),
        ("fail-fast localization", fail_fast),
        ("parallel branches", parallel),
        ("cron minute-scan oracle", cron_oracle),
        ("poll semantics on a simulated week", poll_semantics),
        ("delivery vs deployment", delivery_vs_deployment),
        ("signing gate", signing_gate),
        ("upload retry contract", upload_retry),
        ("parser robustness", parser_robustness),
        ("secret hygiene", secret_hygiene),
    ];
    // Tests may pass `--list` or filters; the suite always runs in full.
    if std::env::args().any(|a| a == "--list") {
        for (i, (name, _)) in criteria.iter().enumerate() {
            println!("criterion {}: {name}: test", i + 1);
        }
        return;
    }
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

