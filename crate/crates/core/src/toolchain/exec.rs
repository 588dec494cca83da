//! Child processes with a wall-clock limit and captured output.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutput {
    pub status: Option<i32>,
    /// Terminating signal, if the child was killed by one.
    pub signal: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
    pub elapsed: Duration,
}

impl ExecOutput {
    pub fn success(&self) -> bool {
        self.status == Some(0) && !self.timed_out
    }
}

#[cfg(unix)]
fn signal_of(status: &std::process::ExitStatus) -> Option<i32> {
    use std::os::unix::process::ExitStatusExt;
    status.signal()
}

#[cfg(not(unix))]
fn signal_of(_: &std::process::ExitStatus) -> Option<i32> {
    None
}

fn drain(mut r: impl Read + Send + 'static) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Runs `argv` in `cwd`, killing it once `timeout` elapses. A missing
/// program is `ToolchainUnavailable`; everything else is reported through
/// the returned output.
pub fn run(argv: &[String], cwd: &Path, env: &BTreeMap<String, String>, timeout: Duration) -> Result<ExecOutput> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| Error::Config("empty command".into()))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .envs(env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::ToolchainUnavailable(format!("`{program}` not found on PATH"))
        } else {
            Error::Io(e)
        }
    })?;
    let out = drain(child.stdout.take().expect("piped stdout"));
    let err = drain(child.stderr.take().expect("piped stderr"));

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            timed_out = true;
            kill_group(&mut child);
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(5));
    };
    Ok(ExecOutput {
        status: status.code(),
        signal: signal_of(&status),
        stdout: out.join().unwrap_or_default(),
        stderr: err.join().unwrap_or_default(),
        timed_out,
        elapsed: start.elapsed(),
    })
}

/// Kills the child and everything it spawned, so grandchildren holding
/// the output pipes cannot outlive the timeout.
#[cfg(unix)]
fn kill_group(child: &mut std::process::Child) {
    // SAFETY: plain syscall on the process group created at spawn.
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_group(child: &mut std::process::Child) {
    let _ = child.kill();
}

/// True when `program` can be spawned.
pub fn available(program: &str) -> bool {
    Command::new(program)
        .arg("--version")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .is_ok()
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;

    fn sh(script: &str, timeout: Duration) -> ExecOutput {
        let argv = ["sh", "-c", script].map(String::from);
        run(&argv, Path::new("."), &BTreeMap::new(), timeout).unwrap()
    }

    #[test]
    fn captures_both_streams() {
        let o = sh("echo out; echo err >&2; exit 3", Duration::from_secs(5));
        assert_eq!(o.stdout, "out\n");
        assert_eq!(o.stderr, "err\n");
        assert_eq!(o.status, Some(3));
        assert!(!o.timed_out);
    }

    #[test]
    fn timeout_kills() {
        let o = sh("sleep 5", Duration::from_millis(100));
        assert!(o.timed_out);
        assert!(o.elapsed < Duration::from_secs(4));
    }

    #[test]
    fn signal_is_reported() {
        let o = sh("kill -SEGV $$", Duration::from_secs(5));
        assert_eq!(o.signal, Some(11));
    }

    #[test]
    fn missing_program() {
        let argv = vec!["definitely-not-a-program-xyz".to_owned()];
        let e = run(&argv, Path::new("."), &BTreeMap::new(), Duration::from_secs(1)).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }
}
