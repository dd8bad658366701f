use std::collections::HashMap;
use std::fs::File;
use std::io::{self, Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::redact::Redactor;

const POLL_INTERVAL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessOutcome {
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub spawn_error: Option<String>,
}

fn exit_code(status: ExitStatus) -> Option<i32> {
    status.code().or_else(|| status.signal().map(|s| 128 + s))
}

fn kill_group(pgid: u32) {
    // SAFETY: kill(2) has no memory-safety preconditions; a negative pid
    // addresses the process group the child leads.
    unsafe {
        libc::kill(-(pgid as libc::pid_t), libc::SIGKILL);
    }
}

fn pump<R: Read + Send + 'static>(mut from: R, to: File, redactor: Redactor) -> thread::JoinHandle<io::Result<()>> {
    thread::spawn(move || {
        let mut writer = redactor.writer(to);
        let mut buf = [0u8; 8192];
        loop {
            match from.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => writer.write_all(&buf[..n])?,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        }
        writer.finish()?.sync_all()
    })
}

/// Runs `command` under `sh -c` in its own process group, streaming
/// scrubbed stdout/stderr into the given log files. On timeout the whole
/// group is killed.
pub fn run_shell(
    command: &str,
    workspace: &Path,
    env: &HashMap<String, String>,
    timeout: Duration,
    stdout_log: &Path,
    stderr_log: &Path,
    redactor: &Redactor,
) -> io::Result<ProcessOutcome> {
    let stdout_file = File::create(stdout_log)?;
    let mut stderr_file = File::create(stderr_log)?;

    let spawned = Command::new("/bin/sh")
        .arg("-c")
        .arg(command)
        .current_dir(workspace)
        .env_clear()
        .envs(env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn();
    let mut child = match spawned {
        Ok(child) => child,
        Err(e) => {
            let message = format!("failed to start step in {}: {e}", workspace.display());
            stderr_file.write_all(&redactor.redact(message.as_bytes()))?;
            stderr_file.write_all(b"\n")?;
            return Ok(ProcessOutcome { exit_code: None, timed_out: false, spawn_error: Some(message) });
        }
    };
    let pgid = child.id();
    let out = pump(child.stdout.take().expect("piped stdout"), stdout_file, redactor.clone());
    let err = pump(child.stderr.take().expect("piped stderr"), stderr_file, redactor.clone());

    let deadline = Instant::now() + timeout;
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(pgid);
            break child.wait()?;
        }
        thread::sleep(POLL_INTERVAL);
    };
    // Stragglers that inherited the pipes would otherwise keep the log
    // pumps alive.
    kill_group(pgid);
    out.join().expect("stdout pump panicked")?;
    err.join().expect("stderr pump panicked")?;

    Ok(ProcessOutcome { exit_code: exit_code(status), timed_out, spawn_error: None })
}
