//! The poll loop: sleep to the next cron minute, ask each due trigger for
//! its branch head, and start a run when the head moved.

use std::cell::Cell;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::cron::{parse_cron, CronError, CronSchedule};
use crate::dsl::TriggerDef;
use crate::scm::{current_head, record_poll, should_trigger, ScmError, DEFAULT_HEAD_CMD};
use crate::store::{Store, StoreError};

pub trait Clock {
    fn now(&self) -> DateTime<Utc>;
    /// Returns false if the loop should stop instead.
    fn sleep_until(&self, t: DateTime<Utc>) -> bool;
}

/// Wall clock; `stop` interrupts a sleep within ~100 ms.
pub struct SystemClock {
    pub stop: Arc<AtomicBool>,
}

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep_until(&self, t: DateTime<Utc>) -> bool {
        loop {
            if self.stop.load(Ordering::SeqCst) {
                return false;
            }
            let left = t - Utc::now();
            if left <= chrono::Duration::zero() {
                return true;
            }
            let nap = left.to_std().unwrap_or_default().min(Duration::from_millis(100));
            std::thread::sleep(nap);
        }
    }
}

/// Jumps straight to each wake-up time; stops once past `end`.
pub struct SimulatedClock {
    now: Cell<DateTime<Utc>>,
    end: DateTime<Utc>,
}

impl SimulatedClock {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Self {
        SimulatedClock { now: Cell::new(start), end }
    }
}

impl Clock for SimulatedClock {
    fn now(&self) -> DateTime<Utc> {
        self.now.get()
    }

    fn sleep_until(&self, t: DateTime<Utc>) -> bool {
        if t > self.end {
            return false;
        }
        self.now.set(t.max(self.now.get()));
        true
    }
}

/// Answers "what is the branch head right now?" for a trigger.
pub trait HeadSource {
    fn head(&self, trigger: &TriggerDef, at: DateTime<Utc>) -> Result<String, ScmError>;
}

impl<F> HeadSource for F
where
    F: Fn(&TriggerDef, DateTime<Utc>) -> Result<String, ScmError>,
{
    fn head(&self, trigger: &TriggerDef, at: DateTime<Utc>) -> Result<String, ScmError> {
        self(trigger, at)
    }
}

/// Runs the head-query shell command. Relative repos resolve against `base_dir`.
pub struct CommandHeadSource {
    pub base_dir: PathBuf,
    /// Takes precedence over each trigger's own `head_cmd`.
    pub head_cmd: Option<String>,
}

impl CommandHeadSource {
    pub fn repo_path(&self, trigger: &TriggerDef) -> PathBuf {
        resolve_repo(&self.base_dir, &trigger.repo)
    }
}

pub fn resolve_repo(base_dir: &Path, repo: &str) -> PathBuf {
    let path = Path::new(repo);
    if path.is_absolute() || repo.contains("://") {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    }
}

impl HeadSource for CommandHeadSource {
    fn head(&self, trigger: &TriggerDef, _at: DateTime<Utc>) -> Result<String, ScmError> {
        let template = self.head_cmd.as_deref().or(trigger.head_cmd.as_deref()).unwrap_or(DEFAULT_HEAD_CMD);
        current_head(&self.repo_path(trigger).to_string_lossy(), &trigger.branch, template)
    }
}

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("pipeline has no triggers")]
    NoTriggers,
    #[error("trigger {expression:?}: {source}")]
    Cron { expression: String, source: CronError },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One poll that found a new head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Firing {
    pub at: DateTime<Utc>,
    pub trigger: usize,
    pub commit: String,
    pub run_number: Option<u64>,
}

/// Polls until the clock says stop. `start_run` receives the trigger and
/// the new head and returns the run number it created, if any.
pub fn run_daemon(
    triggers: &[TriggerDef],
    store: &Store,
    clock: &dyn Clock,
    heads: &dyn HeadSource,
    start_run: &mut dyn FnMut(&TriggerDef, &str) -> Option<u64>,
) -> Result<Vec<Firing>, DaemonError> {
    if triggers.is_empty() {
        return Err(DaemonError::NoTriggers);
    }
    let schedules: Vec<CronSchedule> = triggers
        .iter()
        .map(|t| {
            parse_cron(&t.cron_expression)
                .map_err(|source| DaemonError::Cron { expression: t.cron_expression.clone(), source })
        })
        .collect::<Result<_, _>>()?;

    let mut firings = Vec::new();
    loop {
        let now = clock.now();
        let mut next: Option<DateTime<Utc>> = None;
        for (schedule, trigger) in schedules.iter().zip(triggers) {
            let t = schedule
                .next_after(now)
                .map_err(|source| DaemonError::Cron { expression: trigger.cron_expression.clone(), source })?;
            next = Some(next.map_or(t, |n| n.min(t)));
        }
        let tick = next.expect("at least one trigger");
        if !clock.sleep_until(tick) {
            return Ok(firings);
        }
        for (i, (schedule, trigger)) in schedules.iter().zip(triggers).enumerate() {
            if !schedule.matches(tick) {
                continue;
            }
            let head = match heads.head(trigger, tick) {
                Ok(head) => head,
                Err(e) => {
                    log::warn!("poll of {} ({}) failed: {e}", trigger.repo, trigger.branch);
                    continue;
                }
            };
            let state = store.load_poll_state(&trigger.repo, &trigger.branch);
            let fire = should_trigger(&state, &head);
            store.lock()?.save_poll_state(&record_poll(&state, &head, tick))?;
            if fire {
                let run_number = start_run(trigger, &head);
                firings.push(Firing { at: tick, trigger: i, commit: head, run_number });
            }
        }
    }
}
