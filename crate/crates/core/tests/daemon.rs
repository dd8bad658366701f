mod common;

use std::io::Read;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use common::Sandbox;
use forge::daemon::{run_daemon, CommandHeadSource, HeadSource, SimulatedClock};
use forge::dsl::{plan, TriggerDef};
use forge::executor::{Status, Trigger};
use forge::fixtures::{Scenario, StubServer};
use forge::scm::ScmError;

/// Heads answered from the real fixture repository, with commits added at
/// scripted simulated times.
struct ScriptedRepo<'a> {
    inner: CommandHeadSource,
    commits: std::cell::RefCell<Vec<(DateTime<Utc>, &'a str)>>,
    repo: std::cell::RefCell<&'a mut forge::fixtures::FixtureRepo>,
}

impl HeadSource for ScriptedRepo<'_> {
    fn head(&self, trigger: &TriggerDef, at: DateTime<Utc>) -> Result<String, ScmError> {
        let mut commits = self.commits.borrow_mut();
        while commits.first().is_some_and(|(t, _)| *t <= at) {
            let (_, msg) = commits.remove(0);
            self.repo.borrow_mut().append_commit(msg).unwrap();
        }
        self.inner.head(trigger, at)
    }
}

#[test]
fn simulated_week_runs_each_new_commit_once() {
    let stub = StubServer::start(0).unwrap();
    let mut sb = Sandbox::with(Scenario::AllPass, &stub);
    let engine = sb.engine();
    let store = sb.store();
    let p = plan(&engine.def);
    let triggers = engine.def.triggers.clone();
    let base_dir = sb.repo.path.clone();
    let at = |d, h, m| Utc.with_ymd_and_hms(2024, 1, d, h, m, 0).unwrap();
    let heads = ScriptedRepo {
        inner: CommandHeadSource { base_dir, head_cmd: None },
        // Two commits before Tuesday noon collapse into one run; Saturday's
        // waits for Monday.
        commits: std::cell::RefCell::new(vec![
            (at(2, 9, 0), "fix login"),
            (at(2, 10, 30), "bump version"),
            (at(6, 8, 0), "weekend hotfix"),
        ]),
        repo: std::cell::RefCell::new(&mut sb.repo),
    };
    let clock = SimulatedClock::new(at(1, 0, 30), at(8, 13, 0));
    let mut records = Vec::new();
    let firings = run_daemon(&triggers, &store, &clock, &heads, &mut |_, head| {
        let record = engine.execute_run(&p, head, Trigger::Poll, &mut |_| {}).unwrap();
        records.push(record.status);
        Some(record.run_number)
    })
    .unwrap();
    let times: Vec<DateTime<Utc>> = firings.iter().map(|f| f.at).collect();
    // Bootstrap at Monday noon, then Tuesday noon, then next Monday 00:00.
    assert_eq!(times, [at(1, 12, 0), at(2, 12, 0), at(8, 0, 0)]);
    assert_eq!(records, [Status::Success; 3]);
    let runs = store.list_runs().unwrap();
    assert_eq!(runs, [1, 2, 3]);
    let last = store.load_run(3).unwrap();
    assert_eq!(last.trigger, Trigger::Poll);
    drop(heads);
    assert_eq!(last.commit, sb.repo.head);
}

#[test]
fn identical_traces_give_identical_schedules() {
    let schedule = || {
        let dir = tempfile::tempdir().unwrap();
        let store = forge::store::Store::open(dir.path()).unwrap();
        let trigger = TriggerDef {
            cron_expression: "*/30 8-18 * * *".into(),
            repo: "r".into(),
            branch: "main".into(),
            head_cmd: None,
            span: Default::default(),
        };
        let start = Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap();
        let clock = SimulatedClock::new(start, start + chrono::Duration::days(3));
        let heads = |_: &TriggerDef, t: DateTime<Utc>| -> Result<String, ScmError> {
            Ok(format!("c{}", (t - start).num_hours() / 7))
        };
        run_daemon(&[trigger], &store, &clock, &heads, &mut |_, _| None)
            .unwrap()
            .into_iter()
            .map(|f| (f.at, f.commit))
            .collect::<Vec<_>>()
    };
    let a = schedule();
    assert!(a.len() > 3);
    assert_eq!(a, schedule());
}

#[test]
fn daemon_exits_zero_on_interrupt_while_idle() {
    let stub = StubServer::start(0).unwrap();
    let sb = Sandbox::with(Scenario::AllPass, &stub);
    // A schedule that cannot fire soon: Feb 29 only.
    let text = std::fs::read_to_string(sb.repo.pipelinefile()).unwrap();
    std::fs::write(sb.repo.pipelinefile(), text.replace("0 */12 * * 1-5", "0 0 29 2 *")).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_forge"))
        .arg("--file")
        .arg(sb.repo.pipelinefile())
        .arg("--store")
        .arg(&sb.store_dir)
        .arg("daemon")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(500));
    // SAFETY: signalling our own child process.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGINT);
    }
    let started = Instant::now();
    let status = child.wait().unwrap();
    assert!(started.elapsed() < Duration::from_secs(3));
    assert_eq!(status.code(), Some(0));
    let mut out = String::new();
    child.stdout.take().unwrap().read_to_string(&mut out).unwrap();
    assert!(out.contains("forge daemon: stopped"), "{out}");
    assert!(sb.store().list_runs().unwrap().is_empty());
}
