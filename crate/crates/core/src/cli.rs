//! The `forge` command line. Exit codes: 0 success, 1 run or publish
//! failure, 2 configuration or usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::daemon::{resolve_repo, run_daemon, CommandHeadSource, HeadSource, SystemClock};
use crate::dsl::{parse_pipeline_bytes, plan, validate, PipelineDef, Severity, DEFAULT_BRANCH};
use crate::executor::{
    format_duration_ms, Engine, PromoteError, Promotion, RunRecord, StageResult, Status, StepResult, Trigger,
    WorkspaceSource,
};
use crate::store::{Store, StoreError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Pipeline-as-code CI/CD engine")]
struct Cli {
    /// Pipeline definition file.
    #[arg(long, global = true, default_value = "Pipelinefile")]
    file: PathBuf,
    /// State directory for runs, logs and poll state.
    #[arg(long, global = true, default_value = ".forge")]
    store: PathBuf,
    /// Overrides delivery `team_webhook`.
    #[arg(long, global = true, env = "FORGE_TEAM_WEBHOOK")]
    team_webhook: Option<String>,
    /// Overrides delivery `distribution_endpoint`.
    #[arg(long, global = true, env = "FORGE_DIST_ENDPOINT")]
    distribution_endpoint: Option<String>,
    /// Overrides the head query of every trigger.
    #[arg(long, global = true, env = "FORGE_SCM_HEAD_CMD")]
    head_cmd: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and check the pipeline file.
    Validate,
    /// Execute one run now.
    Run {
        /// Run this revision.
        #[arg(long, conflicts_with = "head")]
        commit: Option<String>,
        /// Run the current branch head (the default).
        #[arg(long)]
        head: bool,
        /// Repository to check out; defaults to the first trigger's repo.
        #[arg(long)]
        repo: Option<PathBuf>,
    },
    /// Poll on the trigger schedules and run new commits.
    Daemon,
    /// Show the newest run.
    Status,
    /// List runs, newest first.
    History,
    /// Print a step's stderr then stdout log.
    Logs { run: u64, stage: String, step: usize },
    /// Publish an awaiting delivery-mode run.
    Promote {
        run: u64,
        /// Who approved the promotion.
        #[arg(long)]
        by: Option<String>,
    },
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_cli<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_cli_with_cancel(args, out, err, Arc::new(AtomicBool::new(false)))
}

/// Like [`run_cli`]; setting `cancel` aborts a run after its current step
/// and stops the daemon.
pub fn run_cli_with_cancel<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write, cancel: Arc<AtomicBool>) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let mut io = Io { out, err };
    let code = match &cli.command {
        Command::Validate => cmd_validate(&cli, &mut io),
        Command::Run { commit, repo, .. } => cmd_run(&cli, commit.as_deref(), repo.as_deref(), cancel, &mut io),
        Command::Daemon => cmd_daemon(&cli, cancel, &mut io),
        Command::Status => cmd_status(&cli, &mut io),
        Command::History => cmd_history(&cli, &mut io),
        Command::Logs { run, stage, step } => cmd_logs(&cli, *run, stage, *step, &mut io),
        Command::Promote { run, by } => cmd_promote(&cli, *run, by.as_deref(), &mut io),
    };
    let _ = io.out.flush();
    code
}

fn plural(n: usize, word: &str) -> String {
    if n == 1 {
        format!("1 {word}")
    } else {
        format!("{n} {word}s")
    }
}

/// Parses, applies overrides, and validates. Diagnostics go to `err`.
fn load_pipeline(cli: &Cli, io: &mut Io<'_>) -> Result<PipelineDef, i32> {
    let bytes = std::fs::read(&cli.file).map_err(|e| {
        let _ = writeln!(io.err, "cannot read {}: {e}", cli.file.display());
        EXIT_USAGE
    })?;
    let mut def = parse_pipeline_bytes(&bytes, &cli.file.to_string_lossy()).map_err(|diags| {
        for d in diags {
            let _ = writeln!(io.err, "{d}");
        }
        EXIT_USAGE
    })?;
    if let Some(url) = &cli.team_webhook {
        def.delivery.team_webhook_url = Some(url.clone());
    }
    if let Some(url) = &cli.distribution_endpoint {
        def.delivery.distribution_endpoint = Some(url.clone());
    }
    if let Some(cmd) = &cli.head_cmd {
        for t in &mut def.triggers {
            t.head_cmd = Some(cmd.clone());
        }
    }
    let diags = validate(&def);
    for d in &diags {
        let _ = writeln!(io.err, "{d}");
    }
    if diags.iter().any(|d| d.severity == Severity::Error) {
        return Err(EXIT_USAGE);
    }
    Ok(def)
}

fn pipeline_dir(cli: &Cli) -> PathBuf {
    match cli.file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn open_store(cli: &Cli, io: &mut Io<'_>) -> Result<Store, i32> {
    Store::open(&cli.store).map_err(|e| {
        let _ = writeln!(io.err, "cannot open store: {e}");
        EXIT_USAGE
    })
}

fn cmd_validate(cli: &Cli, io: &mut Io<'_>) -> i32 {
    match load_pipeline(cli, io) {
        Ok(def) => {
            let _ = writeln!(io.out, "OK: {}, {}", plural(def.stages.len(), "stage"), plural(def.triggers.len(), "trigger"));
            EXIT_OK
        }
        Err(code) => code,
    }
}

fn print_stage(out: &mut dyn Write, stage: &StageResult) {
    let _ = writeln!(out, "[stage] {} ... {}", stage.name, stage.status);
}

fn describe_failure(step: &StepResult, stage: &str) -> String {
    format!("stage \"{stage}\" step {} ({}): {}", step.index, step.label, step.failure_reason())
}

fn print_outcome(out: &mut dyn Write, record: &RunRecord) {
    if let Some((stage, step)) = record.failure() {
        let stage_name = stage.failing_step.as_ref().map_or(stage.name.as_str(), |f| f.stage.as_str());
        match step {
            Some(step) => {
                let _ = writeln!(out, "failed: {}", describe_failure(step, stage_name));
            }
            None => {
                let _ = writeln!(out, "failed: stage \"{}\"", stage.name);
            }
        }
    }
    if let Some(e) = &record.error {
        let _ = writeln!(out, "error: {e}");
    }
    for w in &record.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    let _ = writeln!(
        out,
        "run #{} {} in {} ({} {})",
        record.run_number,
        record.status,
        format_duration_ms(record.duration_ms),
        record.pipeline,
        record.short_commit()
    );
    if record.promotion == Promotion::Awaiting {
        let _ = writeln!(out, "run #{} is awaiting promotion: forge promote {}", record.run_number, record.run_number);
    }
}

fn exit_for(status: Status) -> i32 {
    if status == Status::Success {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

fn engine_for(def: PipelineDef, store: Store, repo: PathBuf, cancel: Arc<AtomicBool>) -> Engine {
    let mut engine = Engine::new(def, store, WorkspaceSource::Checkout { repo });
    engine.cancel = cancel;
    engine
}

fn cmd_run(cli: &Cli, commit: Option<&str>, repo: Option<&Path>, cancel: Arc<AtomicBool>, io: &mut Io<'_>) -> i32 {
    let def = match load_pipeline(cli, io) {
        Ok(def) => def,
        Err(code) => return code,
    };
    let heads = CommandHeadSource { base_dir: pipeline_dir(cli), head_cmd: cli.head_cmd.clone() };
    let trigger = def.triggers.first().cloned().unwrap_or_else(|| crate::dsl::TriggerDef {
        cron_expression: String::new(),
        repo: ".".into(),
        branch: DEFAULT_BRANCH.into(),
        head_cmd: None,
        span: Default::default(),
    });
    let repo_path = match repo {
        Some(r) => r.to_path_buf(),
        None => resolve_repo(&heads.base_dir, &trigger.repo),
    };
    let commit = match commit {
        Some(c) => c.to_string(),
        None => {
            let mut t = trigger.clone();
            t.repo = repo_path.to_string_lossy().into_owned();
            match heads.head(&t, chrono::Utc::now()) {
                Ok(h) => h,
                Err(e) => {
                    let _ = writeln!(io.err, "cannot resolve head: {e}");
                    return EXIT_USAGE;
                }
            }
        }
    };
    let store = match open_store(cli, io) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let p = plan(&def);
    let engine = engine_for(def, store, repo_path, cancel);
    let out = &mut *io.out;
    match engine.execute_run(&p, &commit, Trigger::Manual, &mut |stage| print_stage(out, stage)) {
        Ok(record) => {
            print_outcome(io.out, &record);
            exit_for(record.status)
        }
        Err(e) => {
            let _ = writeln!(io.err, "run failed: {e}");
            EXIT_FAILED
        }
    }
}

fn cmd_daemon(cli: &Cli, cancel: Arc<AtomicBool>, io: &mut Io<'_>) -> i32 {
    let def = match load_pipeline(cli, io) {
        Ok(def) => def,
        Err(code) => return code,
    };
    if def.triggers.is_empty() {
        let _ = writeln!(io.err, "{}: pipeline has no triggers", cli.file.display());
        return EXIT_USAGE;
    }
    let store = match open_store(cli, io) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let heads = CommandHeadSource { base_dir: pipeline_dir(cli), head_cmd: cli.head_cmd.clone() };
    let clock = SystemClock { stop: cancel.clone() };
    let triggers = def.triggers.clone();
    let p = plan(&def);
    let mut engine = engine_for(def, store.clone(), PathBuf::new(), cancel);
    let _ = writeln!(io.out, "forge daemon: polling {}", plural(triggers.len(), "trigger"));
    let _ = io.out.flush();
    let out = &mut *io.out;
    let result = run_daemon(&triggers, &store, &clock, &heads, &mut |trigger, head| {
        let _ = writeln!(out, "new commit {head} on {} ({})", trigger.repo, trigger.branch);
        engine.source = WorkspaceSource::Checkout { repo: heads.repo_path(trigger) };
        let record = engine.execute_run(&p, head, Trigger::Poll, &mut |stage| print_stage(out, stage));
        let number = match record {
            Ok(record) => {
                print_outcome(out, &record);
                Some(record.run_number)
            }
            Err(e) => {
                log::error!("run for {head} failed: {e}");
                None
            }
        };
        let _ = out.flush();
        number
    });
    match result {
        Ok(_) => {
            let _ = writeln!(io.out, "forge daemon: stopped");
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(io.err, "daemon: {e}");
            EXIT_USAGE
        }
    }
}

/// Opens an existing store for reading; `None` if there is none yet.
fn existing_store(cli: &Cli, io: &mut Io<'_>) -> Result<Option<Store>, i32> {
    if !cli.store.exists() {
        return Ok(None);
    }
    open_store(cli, io).map(Some)
}

fn store_error(io: &mut Io<'_>, e: StoreError) -> i32 {
    let _ = writeln!(io.err, "{e}");
    EXIT_USAGE
}

fn cmd_status(cli: &Cli, io: &mut Io<'_>) -> i32 {
    let store = match existing_store(cli, io) {
        Ok(Some(s)) => s,
        Ok(None) => {
            let _ = writeln!(io.out, "no runs");
            return EXIT_OK;
        }
        Err(code) => return code,
    };
    match store.latest_run() {
        Ok(None) => {
            let _ = writeln!(io.out, "no runs");
            EXIT_OK
        }
        Ok(Some(record)) => {
            let _ = writeln!(
                io.out,
                "run #{} {} {} trigger={} mode={} promotion={}",
                record.run_number,
                record.short_commit(),
                record.status,
                record.trigger,
                record.mode,
                record.promotion
            );
            for stage in &record.stages {
                print_stage(io.out, stage);
            }
            print_outcome(io.out, &record);
            EXIT_OK
        }
        Err(e) => store_error(io, e),
    }
}

fn cmd_history(cli: &Cli, io: &mut Io<'_>) -> i32 {
    let store = match existing_store(cli, io) {
        Ok(Some(s)) => s,
        Ok(None) => {
            let _ = writeln!(io.out, "no runs");
            return EXIT_OK;
        }
        Err(code) => return code,
    };
    let numbers = match store.list_runs() {
        Ok(n) => n,
        Err(e) => return store_error(io, e),
    };
    if numbers.is_empty() {
        let _ = writeln!(io.out, "no runs");
        return EXIT_OK;
    }
    let _ = writeln!(io.out, "{:<6} {:<8} {:<8} {:<9} PROMOTION", "RUN", "COMMIT", "STATUS", "DURATION");
    for n in numbers.into_iter().rev() {
        match store.load_run(n) {
            Ok(r) => {
                let _ = writeln!(
                    io.out,
                    "{:<6} {:<8} {:<8} {:<9} {}",
                    format!("#{}", r.run_number),
                    r.short_commit(),
                    r.status.to_string(),
                    format_duration_ms(r.duration_ms),
                    r.promotion
                );
            }
            Err(e) => {
                let _ = writeln!(io.err, "{e}");
            }
        }
    }
    EXIT_OK
}

fn find_stage<'r>(stages: &'r [StageResult], name: &str) -> Option<&'r StageResult> {
    stages.iter().find_map(|s| if s.name == name { Some(s) } else { find_stage(&s.branches, name) })
}

fn cmd_logs(cli: &Cli, run: u64, stage: &str, step: usize, io: &mut Io<'_>) -> i32 {
    let store = match existing_store(cli, io) {
        Ok(Some(s)) => s,
        Ok(None) => return store_error(io, StoreError::NotFound(run)),
        Err(code) => return code,
    };
    let record = match store.load_run(run) {
        Ok(r) => r,
        Err(e) => return store_error(io, e),
    };
    let Some(found) = find_stage(&record.stages, stage) else {
        let _ = writeln!(io.err, "run #{run} has no stage \"{stage}\"");
        return EXIT_USAGE;
    };
    let Some(result) = found.steps.iter().find(|s| s.index == step) else {
        let _ = writeln!(io.err, "stage \"{stage}\" of run #{run} has no step {step}");
        return EXIT_USAGE;
    };
    let logs: Vec<&String> = [&result.stderr_log, &result.stdout_log].into_iter().flatten().collect();
    if logs.is_empty() {
        let _ = writeln!(io.err, "step {step} of \"{stage}\" did not run; no logs");
        return EXIT_USAGE;
    }
    for rel in logs {
        match std::fs::read(store.resolve(rel)) {
            Ok(bytes) => {
                let _ = io.out.write_all(&bytes);
            }
            Err(e) => {
                let _ = writeln!(io.err, "cannot read {rel}: {e}");
                return EXIT_USAGE;
            }
        }
    }
    EXIT_OK
}

fn cmd_promote(cli: &Cli, run: u64, by: Option<&str>, io: &mut Io<'_>) -> i32 {
    let def = match load_pipeline(cli, io) {
        Ok(def) => def,
        Err(code) => return code,
    };
    let store = match existing_store(cli, io) {
        Ok(Some(s)) => s,
        Ok(None) => return store_error(io, StoreError::NotFound(run)),
        Err(code) => return code,
    };
    let actor = by
        .map(str::to_string)
        .or_else(|| std::env::var("USER").ok())
        .unwrap_or_else(|| "unknown".to_string());
    let engine = engine_for(def, store, PathBuf::new(), Arc::new(AtomicBool::new(false)));
    match engine.promote(run, &actor) {
        Ok(report) => {
            for step in &report.steps {
                let _ = writeln!(io.out, "[publish] {} ... {}", step.label, step.status);
            }
            if report.succeeded {
                let _ = writeln!(io.out, "run #{run} promoted by {actor}");
                EXIT_OK
            } else {
                match report.steps.iter().find(|s| s.status == Status::Failed) {
                    Some(step) => {
                        let _ = writeln!(io.out, "promotion failed: {}", step.failure_reason());
                    }
                    None => {
                        let _ = writeln!(io.out, "promotion failed: no publish steps");
                    }
                }
                let _ = writeln!(io.out, "run #{run} is still awaiting promotion");
                EXIT_FAILED
            }
        }
        Err(PromoteError::NothingToPromote { number, state }) => {
            let _ = writeln!(io.err, "nothing to promote: run #{number} is {state}");
            EXIT_USAGE
        }
        Err(PromoteError::Store(e)) => store_error(io, e),
    }
}
