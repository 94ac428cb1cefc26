//! Client for external robustness tools speaking the line-oriented JSON
//! protocol over a subprocess's stdin/stdout.
//!
//! One request per line: `{"id": <int>, "x": [<f64>, ...]}`. One response
//! per line: `{"id": <int>, "rho": <f64>, "kappa": <f64>, "kind": "exact" |
//! "certified_lower" | "adversarial_upper"}`. Responses may arrive in any
//! order and are matched to requests by id; the client assigns wire ids that
//! are unique for its lifetime, so stale responses can never be confused
//! with a later batch.
//!
//! Failure modes are kept distinct:
//! * **protocol violation** — a line that is not a valid response (not JSON,
//!   no id, unknown/duplicate id, missing or out-of-range fields, unknown
//!   kind); carries the request id whenever one could be recovered;
//! * **tool crash** — the subprocess closed its stdout (or failed to start)
//!   with requests still outstanding; carries the count of completed
//!   responses;
//! * **timeout** — no response arrived for `timeout_ms` while requests were
//!   outstanding (the deadline is an inactivity window: every received
//!   response resets it, so a slow-but-steady tool is not penalized for
//!   large batches); names the earliest outstanding request.
//!
//! Writes and reads run on dedicated threads so a stuck tool can never
//! deadlock the caller; dropping the client kills the subprocess.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{PagError, Result};
use crate::oracles::{OracleKind, OracleResult};

/// Program plus arguments of an external oracle tool.
///
/// Parsed from a plain command string on whitespace (no shell quoting; wrap
/// complicated invocations in a script). Also supplied via the
/// `PAG_ORACLE_CMD` environment variable at the CLI level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalOracleCmd {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalOracleCmd {
    pub fn parse(command_line: &str) -> Result<Self> {
        let mut parts = command_line.split_whitespace().map(str::to_owned);
        let program = parts.next().ok_or_else(|| {
            PagError::ParameterOutOfRange {
                name: "oracle_cmd",
                value: 0.0,
                requirement: "non-empty command line",
            }
        })?;
        Ok(ExternalOracleCmd { program, args: parts.collect() })
    }
}

impl std::fmt::Display for ExternalOracleCmd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.program)?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    id: u64,
    x: &'a [f64],
}

/// A fully validated response: the tool's radius/kind plus its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalAnswer {
    pub oracle: OracleResult,
    pub kappa: f64,
}

/// Handle to a running oracle subprocess.
pub struct ExternalClient {
    child: Child,
    to_writer: Option<Sender<String>>,
    from_reader: Receiver<std::io::Result<String>>,
    timeout: Duration,
    next_id: u64,
    command: String,
}

impl ExternalClient {
    /// Spawns the tool. `timeout_ms` is the per-request inactivity deadline.
    pub fn spawn(cmd: &ExternalOracleCmd, timeout_ms: u64) -> Result<Self> {
        let mut child = Command::new(&cmd.program)
            .args(&cmd.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PagError::ToolCrash {
                completed: 0,
                detail: format!("failed to start `{cmd}`: {e}"),
            })?;

        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");

        // Writer thread: drains a channel of pre-serialized lines. A write
        // failure means the tool is gone; the read side reports the crash.
        let (to_writer, writer_rx) = mpsc::channel::<String>();
        std::thread::spawn(move || {
            let mut sink = BufWriter::new(stdin);
            while let Ok(line) = writer_rx.recv() {
                if sink.write_all(line.as_bytes()).is_err() || sink.flush().is_err() {
                    return;
                }
            }
        });

        // Reader thread: forwards stdout lines (or the terminal I/O error).
        let (reader_tx, from_reader) = mpsc::channel::<std::io::Result<String>>();
        std::thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            loop {
                match lines.next() {
                    Some(Ok(line)) => {
                        if reader_tx.send(Ok(line)).is_err() {
                            return;
                        }
                    }
                    Some(Err(e)) => {
                        let _ = reader_tx.send(Err(e));
                        return;
                    }
                    None => return, // EOF: channel disconnect signals it
                }
            }
        });

        Ok(ExternalClient {
            child,
            to_writer: Some(to_writer),
            from_reader,
            timeout: Duration::from_millis(timeout_ms),
            next_id: 0,
            command: cmd.to_string(),
        })
    }

    /// Sends one request per input and collects all responses, in input
    /// order, tolerating arbitrary response reordering by the tool.
    pub fn query_batch(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<ExternalAnswer>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let first_id = self.next_id;
        self.next_id += inputs.len() as u64;

        // id -> position in `inputs`, removed as responses land.
        let mut outstanding: BTreeMap<u64, usize> = BTreeMap::new();
        for (pos, x) in inputs.iter().enumerate() {
            let id = first_id + pos as u64;
            let line = serde_json::to_string(&WireRequest { id, x })? + "\n";
            outstanding.insert(id, pos);
            let sender = self.to_writer.as_ref().expect("writer channel live");
            if sender.send(line).is_err() {
                return Err(self.crash(inputs.len() - outstanding.len(), "stdin writer stopped"));
            }
        }

        let mut answers: Vec<Option<ExternalAnswer>> = vec![None; inputs.len()];
        let mut completed = 0usize;
        while completed < inputs.len() {
            let line = match self.from_reader.recv_timeout(self.timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(self.crash(completed, &format!("stdout read error: {e}"))),
                Err(RecvTimeoutError::Timeout) => {
                    let &request_id = outstanding.keys().next().expect("requests outstanding");
                    return Err(PagError::OracleTimeout {
                        request_id,
                        timeout_ms: self.timeout.as_millis() as u64,
                    });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(self.crash(completed, "stdout closed"));
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let (id, answer) = parse_response(&line, &outstanding)?;
            let pos = outstanding.remove(&id).expect("validated as outstanding");
            answers[pos] = Some(answer);
            completed += 1;
        }
        Ok(answers.into_iter().map(|a| a.expect("all positions answered")).collect())
    }

    /// One-request convenience wrapper.
    pub fn query_one(&mut self, x: &[f64]) -> Result<ExternalAnswer> {
        Ok(self.query_batch(std::slice::from_ref(&x.to_vec()))?.remove(0))
    }

    fn crash(&mut self, completed: usize, detail: &str) -> PagError {
        let status = match self.child.try_wait() {
            Ok(Some(status)) => format!("{status}"),
            Ok(None) => "still running".into(),
            Err(e) => format!("unknown ({e})"),
        };
        PagError::ToolCrash {
            completed,
            detail: format!("`{}`: {detail}; process status: {status}", self.command),
        }
    }
}

impl Drop for ExternalClient {
    fn drop(&mut self) {
        // Closing the channel stops the writer; killing the child unblocks
        // the reader. Threads are detached — they exit on their own once the
        // pipes close, and joining here could hang on orphaned grandchildren
        // that inherited the stdout pipe.
        self.to_writer.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Validates one response line against the outstanding-request table.
/// Returns the id and the parsed answer; errors carry the id when one could
/// be recovered from the line.
fn parse_response(
    line: &str,
    outstanding: &BTreeMap<u64, usize>,
) -> Result<(u64, ExternalAnswer)> {
    let truncated = || {
        let mut s: String = line.chars().take(200).collect();
        if line.len() > s.len() {
            s.push('…');
        }
        s
    };
    let violation = |id: Option<u64>, what: &str| PagError::ProtocolViolation {
        request_id: id,
        detail: format!("{what}: {}", truncated()),
    };

    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|_| violation(None, "response line is not valid JSON"))?;
    let id = value
        .get("id")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| violation(None, "response has no integer id"))?;
    if !outstanding.contains_key(&id) {
        return Err(violation(Some(id), "id was never requested or already answered"));
    }
    let rho = value
        .get("rho")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| violation(Some(id), "response has no numeric rho"))?;
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(violation(Some(id), "rho must be finite and nonnegative"));
    }
    let kappa = value
        .get("kappa")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| violation(Some(id), "response has no numeric kappa"))?;
    if !(kappa.is_finite() && (0.0..=1.0).contains(&kappa)) {
        return Err(violation(Some(id), "kappa must lie in [0, 1]"));
    }
    let kind = match value.get("kind").and_then(|v| v.as_str()) {
        Some("exact") => OracleKind::Exact,
        Some("certified_lower") => OracleKind::CertifiedLower,
        Some("adversarial_upper") => OracleKind::AdversarialUpper,
        _ => return Err(violation(Some(id), "kind must be exact | certified_lower | adversarial_upper")),
    };
    Ok((
        id,
        ExternalAnswer {
            oracle: OracleResult { radius: rho, kind, found_adversarial: None },
            kappa,
        },
    ))
}

/// One-shot query: spawn, ask, shut down.
pub fn external_oracle(
    cmd: &ExternalOracleCmd,
    x: &[f64],
    timeout_ms: u64,
) -> Result<(OracleResult, f64)> {
    let mut client = ExternalClient::spawn(cmd, timeout_ms)?;
    let answer = client.query_one(x)?;
    Ok((answer.oracle, answer.kappa))
}

/// Fans a batch out over a pool of `workers` subprocesses (contiguous
/// chunks, one client per worker) and reassembles answers in input order.
/// Results are identical for any worker count when the tool is a function
/// of its input.
pub fn query_pool(
    cmd: &ExternalOracleCmd,
    timeout_ms: u64,
    workers: usize,
    inputs: &[Vec<f64>],
) -> Result<Vec<ExternalAnswer>> {
    let workers = workers.max(1).min(inputs.len().max(1));
    if workers <= 1 {
        let mut client = ExternalClient::spawn(cmd, timeout_ms)?;
        return client.query_batch(inputs);
    }
    let chunk_size = inputs.len().div_ceil(workers);
    let chunks: Vec<&[Vec<f64>]> = inputs.chunks(chunk_size).collect();
    let mut results: Vec<Result<Vec<ExternalAnswer>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                scope.spawn(move || {
                    let mut client = ExternalClient::spawn(cmd, timeout_ms)?;
                    client.query_batch(chunk)
                })
            })
            .collect();
        for h in handles {
            results.push(h.join().expect("worker thread panicked"));
        }
    });
    let mut merged = Vec::with_capacity(inputs.len());
    for (w, r) in results.into_iter().enumerate() {
        // A fresh client numbers its requests from 0, so request ids in
        // errors are chunk-relative; shift them to positions in `inputs`.
        merged.extend(r.map_err(|e| offset_request_ids(e, (w * chunk_size) as u64))?);
    }
    Ok(merged)
}

/// Rebases chunk-relative request ids in an error onto the caller's input
/// indexing. A crash's completed-count likewise becomes the pool-global
/// position of the crashed worker's first unanswered request (exact for
/// tools that answer in order).
fn offset_request_ids(err: PagError, offset: u64) -> PagError {
    match err {
        PagError::OracleTimeout { request_id, timeout_ms } => {
            PagError::OracleTimeout { request_id: request_id + offset, timeout_ms }
        }
        PagError::ProtocolViolation { request_id: Some(id), detail } => {
            PagError::ProtocolViolation { request_id: Some(id + offset), detail }
        }
        PagError::ToolCrash { completed, detail } => {
            PagError::ToolCrash { completed: completed + offset as usize, detail }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str) -> ExternalOracleCmd {
        ExternalOracleCmd {
            program: "sh".into(),
            args: vec!["-c".into(), script.into()],
        }
    }

    #[test]
    fn command_parsing_splits_on_whitespace() {
        let cmd = ExternalOracleCmd::parse("python3 tool.py --fast").unwrap();
        assert_eq!(cmd.program, "python3");
        assert_eq!(cmd.args, vec!["tool.py", "--fast"]);
        assert!(ExternalOracleCmd::parse("   ").is_err());
    }

    #[test]
    fn tool_exit_before_responding_is_a_crash_with_completed_count() {
        let mut client = ExternalClient::spawn(&sh("exit 3"), 2_000).unwrap();
        match client.query_batch(&[vec![0.1, 0.2]]) {
            Err(PagError::ToolCrash { completed, .. }) => assert_eq!(completed, 0),
            other => panic!("expected ToolCrash, got {other:?}"),
        }
    }

    #[test]
    fn echoed_request_is_a_protocol_violation_naming_the_request() {
        // `cat` sends our own request back: it has an id but no rho.
        let cmd = ExternalOracleCmd { program: "cat".into(), args: vec![] };
        let mut client = ExternalClient::spawn(&cmd, 2_000).unwrap();
        match client.query_batch(&[vec![0.5]]) {
            Err(PagError::ProtocolViolation { request_id: Some(0), detail }) => {
                assert!(detail.contains("rho"), "detail: {detail}");
            }
            other => panic!("expected ProtocolViolation for id 0, got {other:?}"),
        }
    }

    #[test]
    fn garbage_output_is_a_protocol_violation_without_an_id() {
        let mut client =
            ExternalClient::spawn(&sh("read line; echo 'not json at all'"), 2_000).unwrap();
        match client.query_batch(&[vec![0.5]]) {
            Err(PagError::ProtocolViolation { request_id: None, .. }) => {}
            other => panic!("expected ProtocolViolation without id, got {other:?}"),
        }
    }

    #[test]
    fn silence_past_the_deadline_is_a_timeout_naming_the_request() {
        let start = std::time::Instant::now();
        let mut client = ExternalClient::spawn(&sh("read line; sleep 30"), 300).unwrap();
        match client.query_batch(&[vec![0.5]]) {
            Err(PagError::OracleTimeout { request_id: 0, timeout_ms: 300 }) => {}
            other => panic!("expected OracleTimeout, got {other:?}"),
        }
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn well_formed_responses_round_trip() {
        // A sed-based responder: replaces each request line with a fixed
        // valid response for ids 0 and 1, in reverse order of arrival.
        let script = r#"read a; read b; \
            printf '{"id": 1, "rho": 0.25, "kappa": 0.75, "kind": "adversarial_upper"}\n'; \
            printf '{"id": 0, "rho": 0.1, "kappa": 0.9, "kind": "certified_lower"}\n'"#;
        let mut client = ExternalClient::spawn(&sh(script), 5_000).unwrap();
        let answers = client.query_batch(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(answers[0].oracle.radius, 0.1);
        assert_eq!(answers[0].oracle.kind, OracleKind::CertifiedLower);
        assert_eq!(answers[0].kappa, 0.9);
        assert_eq!(answers[1].oracle.radius, 0.25);
        assert_eq!(answers[1].oracle.kind, OracleKind::AdversarialUpper);
    }

    #[test]
    fn out_of_range_kappa_is_a_violation() {
        let script = r#"read a; printf '{"id": 0, "rho": 0.1, "kappa": 1.5, "kind": "exact"}\n'"#;
        let mut client = ExternalClient::spawn(&sh(script), 2_000).unwrap();
        match client.query_batch(&[vec![0.0]]) {
            Err(PagError::ProtocolViolation { request_id: Some(0), detail }) => {
                assert!(detail.contains("kappa"));
            }
            other => panic!("expected kappa violation, got {other:?}"),
        }
    }
}
