//! Child-process helper shared by the analyzer adapter and the external scorer.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use wait_timeout::ChildExt;

#[derive(Debug, thiserror::Error)]
pub enum ProcessError {
    #[error("failed to start {program}: {source}")]
    Spawn { program: String, source: std::io::Error },
    #[error("{program} timed out after {timeout:?}")]
    Timeout { program: String, timeout: Duration },
    #[error("{program} exited with {status}: {stderr}")]
    Failed {
        program: String,
        status: String,
        stderr: String,
    },
    #[error("{program}: {source}")]
    Io { program: String, source: std::io::Error },
    #[error("{program} wrote non-UTF-8 output")]
    Encoding { program: String },
}

/// Runs `program args...`, feeds `stdin`, and returns stdout on success.
pub(crate) fn run(program: &str, args: &[String], stdin: &[u8], timeout: Duration) -> Result<String, ProcessError> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| ProcessError::Spawn {
            program: program.to_owned(),
            source,
        })?;

    let mut child_stdin = child.stdin.take().expect("piped stdin");
    let input = stdin.to_vec();
    let writer = thread::spawn(move || {
        // A child that exits without reading its input yields EPIPE here; the
        // exit status is what matters.
        let _ = child_stdin.write_all(&input);
    });
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = thread::spawn(move || {
        let mut buf = Vec::new();
        stdout.read_to_end(&mut buf).map(|_| buf)
    });
    let mut stderr = child.stderr.take().expect("piped stderr");
    let err_reader = thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr.read_to_string(&mut buf);
        buf
    });

    let io_err = |source| ProcessError::Io {
        program: program.to_owned(),
        source,
    };
    let status = match child.wait_timeout(timeout).map_err(io_err)? {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ProcessError::Timeout {
                program: program.to_owned(),
                timeout,
            });
        }
    };
    let _ = writer.join();
    let out = reader.join().expect("reader thread").map_err(io_err)?;
    let stderr = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(ProcessError::Failed {
            program: program.to_owned(),
            status: status.to_string(),
            stderr: stderr.trim().to_owned(),
        });
    }
    String::from_utf8(out).map_err(|_| ProcessError::Encoding {
        program: program.to_owned(),
    })
}
