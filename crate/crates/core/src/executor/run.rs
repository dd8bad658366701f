use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use chrono::Utc;
use thiserror::Error;

use super::{
    execute_stage, execute_step, skipped_stage, stage_dir_names, ExecContext, InternalSteps, Promotion, RunRecord,
    StageResult, Status, StepResult, StepRole, Trigger, RECORD_SCHEMA,
};
use crate::delivery::{
    collect_artifact, notify_team, notify_users, publish_decision, upload_artifact, Artifact, ArtifactKind,
    DistributionReceipt, PublishDecision, RetryPolicy,
};
use crate::dsl::{plan_for_mode, ExecutionPlan, PipelineDef, StepDef, StepKind};
use crate::redact::{Redactor, DIST_API_KEY_ENV};
use crate::store::{Store, StoreError};

/// Where a run's workspace comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkspaceSource {
    /// Clone this repository and check out the run's commit.
    Checkout { repo: PathBuf },
    /// Start from an empty directory.
    Empty,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Error)]
pub enum PromoteError {
    #[error("nothing to promote: run #{number} is {state}")]
    NothingToPromote { number: u64, state: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct PromoteReport {
    pub record: RunRecord,
    pub steps: Vec<StepResult>,
    pub succeeded: bool,
}

/// Runs plans for one pipeline against one store.
pub struct Engine {
    pub def: PipelineDef,
    pub store: Store,
    /// Base environment for steps; defaults to this process's environment.
    pub env: HashMap<String, String>,
    pub source: WorkspaceSource,
    pub retry: RetryPolicy,
    /// Set to stop after the current step; the run is recorded as aborted.
    pub cancel: Arc<AtomicBool>,
}

struct DeliveryEffects<'a> {
    def: &'a PipelineDef,
    workspace: &'a Path,
    outbox: PathBuf,
    retry: &'a RetryPolicy,
    api_key: Option<String>,
    run_number: u64,
    version: String,
    artifact: Mutex<Option<Artifact>>,
    receipt: Mutex<Option<DistributionReceipt>>,
}

impl InternalSteps for DeliveryEffects<'_> {
    fn run_internal(&self, step: &StepDef, log: &mut dyn Write) -> Result<(), String> {
        let delivery = &self.def.delivery;
        match step.kind {
            StepKind::Upload => {
                let endpoint = delivery.distribution_endpoint.as_deref().ok_or("no distribution endpoint configured")?;
                let artifact = collect_artifact(self.workspace, &delivery.artifact_glob, ArtifactKind::Release, &self.version)
                    .map_err(|e| e.to_string())?;
                let _ = writeln!(log, "artifact {} ({} bytes, sha256 {})", artifact.path.display(), artifact.size_bytes, artifact.sha256);
                let receipt = upload_artifact(&artifact, endpoint, self.api_key.as_deref(), self.retry);
                *self.artifact.lock().unwrap() = Some(artifact);
                let receipt = receipt.map_err(|e| e.to_string())?;
                let _ = writeln!(log, "uploaded in {} attempt(s): {}", receipt.attempts, receipt.download_url);
                *self.receipt.lock().unwrap() = Some(receipt);
                Ok(())
            }
            StepKind::NotifyUsers => {
                let receipt = self.receipt.lock().unwrap().clone().ok_or("no upload receipt to link to")?;
                let paths = notify_users(
                    &delivery.user_recipients,
                    &receipt,
                    &self.outbox,
                    &self.def.name,
                    self.run_number,
                    &self.version,
                )
                .map_err(|e| e.to_string())?;
                for path in paths {
                    let _ = writeln!(log, "wrote {}", path.display());
                }
                Ok(())
            }
            other => Err(format!("`{other}` cannot run inside a stage")),
        }
    }
}

fn git(args: &[&str], cwd: Option<&Path>) -> Result<(), String> {
    let mut cmd = Command::new("git");
    cmd.args(args).stdin(Stdio::null());
    if let Some(cwd) = cwd {
        cmd.current_dir(cwd);
    }
    let out = cmd.output().map_err(|e| format!("cannot run git: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("git {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn prepare_workspace(source: &WorkspaceSource, dir: &Path, commit: &str) -> Result<(), String> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| format!("cannot clear workspace: {e}"))?;
    }
    match source {
        WorkspaceSource::Empty => std::fs::create_dir_all(dir).map_err(|e| format!("cannot create workspace: {e}")),
        WorkspaceSource::Checkout { repo } => {
            let repo = repo.to_string_lossy();
            let dest = dir.to_string_lossy();
            git(&["clone", "-q", "--no-checkout", &repo, &dest], None)?;
            git(&["-c", "advice.detachedHead=false", "checkout", "-q", "--detach", commit], Some(dir))
        }
    }
}

impl Engine {
    pub fn new(def: PipelineDef, store: Store, source: WorkspaceSource) -> Engine {
        Engine {
            def,
            store,
            env: std::env::vars().collect(),
            source,
            retry: RetryPolicy::default(),
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }

    fn step_env(&self, run_number: u64, commit: &str, workspace: &Path) -> HashMap<String, String> {
        let mut env = self.env.clone();
        env.extend(self.def.environment.iter().cloned());
        env.insert("FORGE_RUN_NUMBER".into(), run_number.to_string());
        env.insert("FORGE_COMMIT".into(), commit.to_string());
        env.insert("FORGE_WORKSPACE".into(), workspace.to_string_lossy().into_owned());
        env
    }

    fn redactor(&self, env: &HashMap<String, String>) -> Redactor {
        let names: Vec<&str> = self
            .def
            .signing
            .iter()
            .flat_map(|s| [s.store_password_env.as_str(), s.key_password_env.as_str()])
            .collect();
        Redactor::from_env(env, &names)
    }

    fn outbox_dir(&self) -> PathBuf {
        let dir = Path::new(&self.def.delivery.outbox_dir);
        if dir.is_absolute() {
            dir.to_path_buf()
        } else {
            self.store.root().join(dir)
        }
    }

    /// Executes `plan` for `commit` and persists the record. `on_stage` is
    /// called as each top-level stage finishes (skipped ones included).
    pub fn execute_run(
        &self,
        plan: &ExecutionPlan,
        commit: &str,
        trigger: Trigger,
        on_stage: &mut dyn FnMut(&StageResult),
    ) -> Result<RunRecord, EngineError> {
        let run_number = self.store.lock()?.allocate_run_number()?;
        let clock = Instant::now();
        let workspace = self.store.workspace_dir(run_number);
        let env = self.step_env(run_number, commit, &workspace);
        let store = self.store.clone().with_redactor(self.redactor(&env));
        let defer_publish = publish_decision(plan.mode) == PublishDecision::AwaitPromotion;

        let mut record = RunRecord {
            schema: RECORD_SCHEMA,
            pipeline: self.def.name.clone(),
            run_number,
            commit: commit.to_string(),
            trigger,
            mode: plan.mode,
            stages: Vec::new(),
            status: Status::Running,
            promotion: Promotion::NotApplicable,
            created: Utc::now(),
            finished: None,
            duration_ms: 0,
            workspace: store.relative(&workspace),
            artifact: None,
            receipt: None,
            post: Vec::new(),
            promotion_steps: Vec::new(),
            warnings: Vec::new(),
            error: None,
        };
        store.lock()?.save_run(&record)?;

        let effects = DeliveryEffects {
            def: &self.def,
            workspace: &workspace,
            outbox: self.outbox_dir(),
            retry: &self.retry,
            api_key: env.get(DIST_API_KEY_ENV).cloned(),
            run_number,
            version: format!("{run_number}-{}", &commit[..commit.len().min(7)]),
            artifact: Mutex::new(None),
            receipt: Mutex::new(None),
        };

        let mut halted: Option<Status> = None;
        if let Err(e) = prepare_workspace(&self.source, &workspace, commit) {
            record.error = Some(store.redactor().redact_str(&e));
            halted = Some(Status::Aborted);
        }
        let names: Vec<&str> = plan
            .nodes
            .iter()
            .flat_map(|n| match n {
                crate::dsl::PlanNode::Serial(s) => vec![s.name.as_str()],
                crate::dsl::PlanNode::Parallel { name, branches } => {
                    std::iter::once(name.as_str()).chain(branches.iter().map(|b| b.name.as_str())).collect()
                }
            })
            .collect();
        let log_root = store.run_dir(run_number).join("logs");
        let ctx = ExecContext {
            workspace: workspace.clone(),
            env,
            redactor: store.redactor().clone(),
            log_root,
            path_base: store.root().to_path_buf(),
            stage_dirs: stage_dir_names(names),
            internal: &effects,
            signing: self.def.signing.clone(),
            defer_publish,
            cancel: self.cancel.clone(),
        };

        for node in &plan.nodes {
            let result = match halted {
                Some(_) => skipped_stage(node, defer_publish),
                None => execute_stage(node, &ctx),
            };
            if halted.is_none() && result.status != Status::Success {
                halted = Some(result.status);
            }
            on_stage(&result);
            record.stages.push(result);
        }

        record.status = halted.unwrap_or(Status::Success);
        record.artifact = effects.artifact.lock().unwrap().take();
        record.receipt = effects.receipt.lock().unwrap().take();
        let has_publish = plan.nodes.iter().any(|n| n.steps().any(|s| s.kind == StepKind::Publish));
        if record.status == Status::Success && defer_publish && has_publish {
            record.promotion = Promotion::Awaiting;
        }
        record.finished = Some(Utc::now());
        record.duration_ms = clock.elapsed().as_millis() as u64;

        for (i, step) in self.def.post.iter().enumerate() {
            let result = self.run_post_step(step, i + 1, &record);
            if let Some(e) = &result.error {
                record.warnings.push(format!("{}: {e}", step.label()));
            }
            record.post.push(result);
        }

        store.lock()?.save_run(&record)?;
        Ok(record)
    }

    fn run_post_step(&self, step: &StepDef, index: usize, record: &RunRecord) -> StepResult {
        let started = Utc::now();
        let clock = Instant::now();
        let outcome = match (step.kind, self.def.delivery.team_webhook_url.as_deref()) {
            (StepKind::NotifyTeam, Some(url)) => notify_team(url, record).map_err(|e| e.to_string()),
            (StepKind::NotifyTeam, None) => Err("no team webhook configured".to_string()),
            (other, _) => Err(format!("`{other}` is not supported in post")),
        };
        if let Err(e) = &outcome {
            log::warn!("post step {} failed: {e}", step.label());
        }
        let mut result = StepResult::skipped(index, step.kind.into(), step.label(), step.command.clone());
        result.status = if outcome.is_ok() { Status::Success } else { Status::Failed };
        result.exit_code = outcome.is_ok().then_some(0);
        result.error = outcome.err();
        result.started = Some(started);
        result.ended = Some(Utc::now());
        result.duration_ms = clock.elapsed().as_millis() as u64;
        result
    }

    /// Runs the deferred publish steps of an awaiting delivery-mode run.
    /// Holds the store lock throughout, so concurrent promotions of the
    /// same run execute publish at most once.
    pub fn promote(&self, run_number: u64, actor: &str) -> Result<PromoteReport, PromoteError> {
        let probe = self.store.load_run(run_number)?;
        let workspace = self.store.resolve(&probe.workspace);
        let env = self.step_env(run_number, &probe.commit, &workspace);
        let store = self.store.clone().with_redactor(self.redactor(&env));
        let lock = store.lock()?;
        let mut record = store.load_run(run_number)?;
        if record.promotion != Promotion::Awaiting {
            let state = match &record.promotion {
                Promotion::Promoted { by, .. } => format!("already promoted by {by}"),
                _ => format!("not awaiting promotion ({} run in {} mode)", record.status, record.mode),
            };
            return Err(PromoteError::NothingToPromote { number: run_number, state });
        }
        let run_dir = self.store.run_dir(run_number);
        let attempt = (1..).find(|n| !run_dir.join("logs").join(format!("promote-{n}")).exists()).unwrap();

        let plan = plan_for_mode(&self.def, record.mode);
        let publish: Vec<(String, usize, StepDef)> = plan
            .nodes
            .iter()
            .flat_map(|n| match n {
                crate::dsl::PlanNode::Serial(s) => vec![s.clone()],
                crate::dsl::PlanNode::Parallel { branches, .. } => branches.clone(),
            })
            .flat_map(|s| {
                let name = s.name.clone();
                s.steps
                    .into_iter()
                    .enumerate()
                    .filter(|(_, st)| st.kind == StepKind::Publish)
                    .map(move |(i, st)| (name.clone(), i + 1, st))
            })
            .collect();

        let mut ctx = ExecContext::new(workspace, run_dir.join("logs").join(format!("promote-{attempt}")));
        ctx.env = env;
        ctx.redactor = store.redactor().clone();
        ctx.path_base = self.store.root().to_path_buf();
        ctx.stage_dirs = stage_dir_names(publish.iter().map(|(s, _, _)| s.as_str()).collect::<std::collections::BTreeSet<_>>());
        ctx.cancel = self.cancel.clone();

        let mut steps = Vec::new();
        let mut ok = true;
        for (stage, index, step) in &publish {
            if !ok {
                steps.push(StepResult::skipped(*index, StepRole::Publish, step.label(), step.command.clone()));
                continue;
            }
            let result = execute_step(step, *index, stage, &ctx);
            ok = result.status == Status::Success;
            steps.push(result);
        }
        if publish.is_empty() {
            ok = false;
            record.warnings.push("promotion found no publish steps in the pipeline".to_string());
        }
        record.promotion_steps.extend(steps.iter().cloned());
        if ok {
            record.promotion = Promotion::Promoted { at: Utc::now(), by: actor.to_string() };
        }
        lock.save_run(&record)?;
        Ok(PromoteReport { record, steps, succeeded: ok })
    }
}
