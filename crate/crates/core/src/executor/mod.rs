//! Step, stage, and run execution.
//!
//! Steps run serially within a stage and stop at the first failure; a
//! parallel group runs every branch to completion on its own thread. Across
//! stages the run is fail-fast: after the first failed stage every later
//! stage is recorded as skipped.

mod process;
mod record;
mod run;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;

use crate::dsl::{GateKind, PlanNode, SerialStage, SigningConfig, StepDef, StepKind};
use crate::gates::{acceptance_gate, parse_test_summary, verify_signing, GateOutcome};
use crate::redact::Redactor;

pub use process::{run_shell, ProcessOutcome};
pub use record::{
    format_duration_ms, satisfies_prefix_property, FailingStep, GateReport, Promotion, RunRecord, StageResult,
    Status, StepResult, StepRole, Trigger, RECORD_SCHEMA,
};
pub use run::{Engine, EngineError, PromoteError, PromoteReport, WorkspaceSource};

/// Runs step kinds that are not shell commands (upload, notify_*).
pub trait InternalSteps: Sync {
    /// Progress lines go to `log`; an `Err` fails the step.
    fn run_internal(&self, step: &StepDef, log: &mut dyn Write) -> Result<(), String>;
}

/// Rejects every internal step; for plans without delivery effects.
pub struct NoInternalSteps;

impl InternalSteps for NoInternalSteps {
    fn run_internal(&self, step: &StepDef, _log: &mut dyn Write) -> Result<(), String> {
        Err(format!("`{}` steps are not available here", step.kind))
    }
}

/// Everything a stage needs to run.
pub struct ExecContext<'a> {
    pub workspace: PathBuf,
    /// Process and pipeline environment; step overlays are applied on top.
    pub env: HashMap<String, String>,
    pub redactor: Redactor,
    /// Logs land in `<log_root>/<stage dir>/<index>.{stdout,stderr}.log`.
    pub log_root: PathBuf,
    /// Log paths in results are recorded relative to this directory.
    pub path_base: PathBuf,
    pub stage_dirs: HashMap<String, String>,
    pub internal: &'a dyn InternalSteps,
    pub signing: Option<SigningConfig>,
    /// Leave publish steps out (delivery mode awaiting promotion).
    pub defer_publish: bool,
    pub cancel: Arc<AtomicBool>,
}

impl<'a> ExecContext<'a> {
    pub fn new(workspace: impl Into<PathBuf>, log_root: impl Into<PathBuf>) -> Self {
        let log_root = log_root.into();
        ExecContext {
            workspace: workspace.into(),
            env: std::env::vars().collect(),
            redactor: Redactor::default(),
            path_base: log_root.clone(),
            log_root,
            stage_dirs: HashMap::new(),
            internal: &NoInternalSteps,
            signing: None,
            defer_publish: false,
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }

    fn stage_dir(&self, stage: &str) -> PathBuf {
        let name = self.stage_dirs.get(stage).cloned().unwrap_or_else(|| sanitize(stage));
        self.log_root.join(name)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.path_base).unwrap_or(path).to_string_lossy().into_owned()
    }

    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "_".to_string()
    } else {
        s
    }
}

/// Unique, filesystem-safe log directory names for a set of stage names.
pub fn stage_dir_names<'n>(names: impl IntoIterator<Item = &'n str>) -> HashMap<String, String> {
    let mut used = std::collections::HashSet::new();
    let mut out = HashMap::new();
    for name in names {
        let base = sanitize(name);
        let mut candidate = base.clone();
        let mut n = 2;
        while !used.insert(candidate.clone()) {
            candidate = format!("{base}-{n}");
            n += 1;
        }
        out.insert(name.to_string(), candidate);
    }
    out
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// Executes one step, writing its logs. Never fails on a nonzero exit;
/// that becomes a `Failed` result.
pub fn execute_step(step: &StepDef, index: usize, stage: &str, ctx: &ExecContext<'_>) -> StepResult {
    let started = Utc::now();
    let clock = Instant::now();
    let dir = ctx.stage_dir(stage);
    let stdout_path = dir.join(format!("{index}.stdout.log"));
    let stderr_path = dir.join(format!("{index}.stderr.log"));
    let mut result = StepResult {
        index,
        role: step.kind.into(),
        label: step.label(),
        command: step.command.clone(),
        exit_code: None,
        status: Status::Running,
        timed_out: false,
        started: Some(started),
        ended: None,
        duration_ms: 0,
        stdout_log: Some(ctx.relative(&stdout_path)),
        stderr_log: Some(ctx.relative(&stderr_path)),
        gate: None,
        error: None,
    };
    let finish = |mut r: StepResult| {
        r.ended = Some(Utc::now());
        r.duration_ms = elapsed_ms(clock);
        r
    };
    if let Err(e) = fs::create_dir_all(&dir) {
        result.status = Status::Failed;
        result.error = Some(format!("cannot create log directory: {e}"));
        result.stdout_log = None;
        result.stderr_log = None;
        return finish(result);
    }

    if step.kind.takes_command() {
        let mut env = ctx.env.clone();
        env.extend(step.env.iter().cloned());
        let outcome = run_shell(
            &step.command,
            &ctx.workspace,
            &env,
            Duration::from_secs(step.timeout_seconds),
            &stdout_path,
            &stderr_path,
            &ctx.redactor,
        );
        match outcome {
            Err(e) => {
                result.status = Status::Failed;
                result.error = Some(format!("cannot write step logs: {e}"));
            }
            Ok(outcome) => {
                result.exit_code = outcome.exit_code;
                result.timed_out = outcome.timed_out;
                result.error = outcome.spawn_error;
                if outcome.timed_out {
                    result.error = Some(format!("timed out after {}s", step.timeout_seconds));
                }
                let exited_ok = outcome.exit_code == Some(0) && !outcome.timed_out;
                result.status = if exited_ok { Status::Success } else { Status::Failed };
                if step.gate == Some(GateKind::Acceptance) && !outcome.timed_out && result.error.is_none() {
                    let stdout = fs::read(&stdout_path).unwrap_or_default();
                    let summary = parse_test_summary(&String::from_utf8_lossy(&stdout));
                    let verdict = acceptance_gate(&summary);
                    if !verdict.passed() {
                        result.status = Status::Failed;
                    }
                    result.gate = Some(GateReport { summary: summary.ok(), outcome: verdict });
                }
            }
        }
    } else {
        let logs = (fs::File::create(&stdout_path), fs::File::create(&stderr_path));
        match logs {
            (Ok(out), Ok(mut err)) => {
                let mut writer = ctx.redactor.writer(out);
                let outcome = ctx.internal.run_internal(step, &mut writer);
                let _ = writer.finish();
                match outcome {
                    Ok(()) => {
                        result.exit_code = Some(0);
                        result.status = Status::Success;
                    }
                    Err(message) => {
                        let message = ctx.redactor.redact_str(&message);
                        let _ = writeln!(err, "{message}");
                        result.status = Status::Failed;
                        result.error = Some(message);
                    }
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                result.status = Status::Failed;
                result.error = Some(format!("cannot write step logs: {e}"));
            }
        }
    }
    finish(result)
}

fn signing_check(stage: &str, ctx: &ExecContext<'_>) -> StepResult {
    let started = Utc::now();
    let clock = Instant::now();
    let dir = ctx.stage_dir(stage);
    let outcome = match &ctx.signing {
        Some(cfg) => verify_signing(cfg, &ctx.env, &ctx.workspace),
        None => GateOutcome::Fail("no signing configuration".to_string()),
    };
    let log = dir.join("0.stdout.log");
    let logged = fs::create_dir_all(&dir).and_then(|_| {
        let line = match &outcome {
            GateOutcome::Pass => "signing configuration verified\n".to_string(),
            GateOutcome::Fail(reason) => format!("signing check failed: {reason}\n"),
        };
        fs::write(&log, ctx.redactor.redact(line.as_bytes()))
    });
    let passed = outcome.passed();
    StepResult {
        index: 0,
        role: StepRole::VerifySigning,
        label: "verify_signing".to_string(),
        command: String::new(),
        exit_code: passed.then_some(0),
        status: if passed { Status::Success } else { Status::Failed },
        timed_out: false,
        started: Some(started),
        ended: Some(Utc::now()),
        duration_ms: elapsed_ms(clock),
        stdout_log: logged.is_ok().then(|| ctx.relative(&log)),
        stderr_log: None,
        error: match &outcome {
            GateOutcome::Pass => None,
            GateOutcome::Fail(reason) => Some(reason.clone()),
        },
        gate: Some(GateReport { summary: None, outcome }),
    }
}

fn skipped_step(step: &StepDef, index: usize) -> StepResult {
    StepResult::skipped(index, step.kind.into(), step.label(), step.command.clone())
}

fn run_serial(stage: &SerialStage, ctx: &ExecContext<'_>) -> StageResult {
    let started = Utc::now();
    let clock = Instant::now();
    let mut steps = Vec::new();
    let mut halted: Option<Status> = None;
    let mut failing_step = None;

    if stage.requires_signing {
        if ctx.cancelled() {
            halted = Some(Status::Aborted);
        } else {
            let check = signing_check(&stage.name, ctx);
            if check.status == Status::Failed {
                halted = Some(Status::Failed);
                failing_step = Some(FailingStep { stage: stage.name.clone(), step: 0 });
            }
            steps.push(check);
        }
    }
    for (i, step) in stage.steps.iter().enumerate() {
        let index = i + 1;
        if step.kind == StepKind::Publish && ctx.defer_publish {
            continue;
        }
        if halted.is_some() {
            steps.push(skipped_step(step, index));
            continue;
        }
        if ctx.cancelled() {
            halted = Some(Status::Aborted);
            steps.push(skipped_step(step, index));
            continue;
        }
        let result = execute_step(step, index, &stage.name, ctx);
        if result.status == Status::Failed {
            halted = Some(Status::Failed);
            failing_step = Some(FailingStep { stage: stage.name.clone(), step: index });
        }
        steps.push(result);
    }
    StageResult {
        name: stage.name.clone(),
        status: halted.unwrap_or(Status::Success),
        steps,
        branches: Vec::new(),
        failing_step,
        started: Some(started),
        ended: Some(Utc::now()),
        duration_ms: elapsed_ms(clock),
    }
}

/// Runs one plan node. Parallel branches all run to completion; the group
/// fails if any branch fails.
pub fn execute_stage(node: &PlanNode, ctx: &ExecContext<'_>) -> StageResult {
    match node {
        PlanNode::Serial(stage) => run_serial(stage, ctx),
        PlanNode::Parallel { name, branches } => {
            let started = Utc::now();
            let clock = Instant::now();
            let results: Vec<StageResult> = std::thread::scope(|scope| {
                let handles: Vec<_> = branches.iter().map(|b| scope.spawn(move || run_serial(b, ctx))).collect();
                handles.into_iter().map(|h| h.join().expect("branch thread panicked")).collect()
            });
            let failed = results.iter().find(|b| b.status == Status::Failed);
            let status = if failed.is_some() {
                Status::Failed
            } else if results.iter().any(|b| b.status == Status::Aborted) {
                Status::Aborted
            } else {
                Status::Success
            };
            StageResult {
                name: name.clone(),
                status,
                steps: Vec::new(),
                failing_step: failed.and_then(|b| b.failing_step.clone()),
                branches: results,
                started: Some(started),
                ended: Some(Utc::now()),
                duration_ms: elapsed_ms(clock),
            }
        }
    }
}

/// A stage that never ran because an earlier stage failed or was aborted.
pub fn skipped_stage(node: &PlanNode, defer_publish: bool) -> StageResult {
    let serial = |s: &SerialStage| StageResult {
        name: s.name.clone(),
        status: Status::Skipped,
        steps: s
            .steps
            .iter()
            .enumerate()
            .filter(|(_, st)| !(defer_publish && st.kind == StepKind::Publish))
            .map(|(i, st)| skipped_step(st, i + 1))
            .collect(),
        branches: Vec::new(),
        failing_step: None,
        started: None,
        ended: None,
        duration_ms: 0,
    };
    match node {
        PlanNode::Serial(s) => serial(s),
        PlanNode::Parallel { name, branches } => StageResult {
            name: name.clone(),
            status: Status::Skipped,
            steps: Vec::new(),
            branches: branches.iter().map(serial).collect(),
            failing_step: None,
            started: None,
            ended: None,
            duration_ms: 0,
        },
    }
}
