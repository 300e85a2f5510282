//! Running candidates against tests, either through a child-process runner
//! speaking a one-shot JSON protocol or through a scripted mock.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Candidate, TaskInstance};

pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;

/// Extra wall-clock time granted to the runner beyond the requested timeout
/// before it is killed.
pub const DEFAULT_GRACE_MS: u64 = 500;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("task {0} has no visible test")]
    NoVisibleTest(String),
    #[error("task {0} has no hidden tests")]
    NoHiddenTests(String),
    #[error("could not read executor fixture {path}: {message}")]
    Fixture { path: String, message: String },
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    RuntimeError,
    Timeout,
    SandboxFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    /// Printed value of the test expression; present exactly when `status` is ok.
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub duration_ms: u64,
    #[serde(default)]
    pub detail: Option<String>,
}

impl ExecutionOutcome {
    pub fn ok(output: impl Into<String>, duration_ms: u64) -> Self {
        Self {
            status: ExecStatus::Ok,
            output: Some(output.into()),
            duration_ms,
            detail: None,
        }
    }

    pub fn failed(status: ExecStatus, detail: impl Into<String>, duration_ms: u64) -> Self {
        debug_assert_ne!(status, ExecStatus::Ok);
        Self {
            status,
            output: None,
            duration_ms,
            detail: Some(detail.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    fn check(&self) -> Result<(), String> {
        match (self.status, &self.output) {
            (ExecStatus::Ok, None) => Err("ok outcome without output".into()),
            (s, Some(_)) if s != ExecStatus::Ok => Err(format!("{s:?} outcome carries output")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestPurpose {
    Visible,
    Hidden,
}

/// One execution request. The runner sees only `context`, `body`, `test`
/// and `timeout_ms`; the rest lets scripted executors look outcomes up.
#[derive(Debug, Clone)]
pub struct ExecJob<'a> {
    pub task_id: &'a str,
    pub index: usize,
    pub context: &'a str,
    pub body: &'a str,
    pub test: &'a str,
    pub timeout_ms: u64,
    pub purpose: TestPurpose,
}

pub trait Executor: Send + Sync {
    fn run(&self, job: &ExecJob<'_>) -> ExecutionOutcome;
}

#[derive(Debug, Serialize)]
struct RunnerRequest<'a> {
    context: &'a str,
    body: &'a str,
    test: &'a str,
    timeout_ms: u64,
}

/// Spawns `command` once per job, writes the request as one JSON object on
/// stdin and reads one JSON outcome from stdout.
#[derive(Debug, Clone)]
pub struct ProcessSandbox {
    pub command: Vec<String>,
    pub grace_ms: u64,
}

impl ProcessSandbox {
    pub fn new(command: Vec<String>) -> Self {
        assert!(!command.is_empty(), "runner command must not be empty");
        Self {
            command,
            grace_ms: DEFAULT_GRACE_MS,
        }
    }

    fn run_inner(&self, job: &ExecJob<'_>, started: Instant) -> Result<ExecutionOutcome, String> {
        let request = serde_json::to_vec(&RunnerRequest {
            context: job.context,
            body: job.body,
            test: job.test,
            timeout_ms: job.timeout_ms,
        })
        .map_err(|e| e.to_string())?;
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawn {}: {e}", self.command[0]))?;

        // Readers run on their own threads so a chatty runner cannot block
        // on a full pipe while we wait for it.
        let mut stdout = child.stdout.take().expect("piped");
        let mut stderr = child.stderr.take().expect("piped");
        let out_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let err_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });
        if let Some(mut stdin) = child.stdin.take() {
            // A runner that exits without reading is reported by its status.
            let _ = stdin.write_all(&request);
        }

        let deadline = Duration::from_millis(job.timeout_ms + self.grace_ms);
        let status = loop {
            if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
                break status;
            }
            if started.elapsed() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Ok(ExecutionOutcome::failed(
                    ExecStatus::Timeout,
                    "killed after deadline",
                    elapsed_ms(started),
                ));
            }
            thread::sleep(Duration::from_millis(5));
        };
        let stdout = out_reader
            .join()
            .map_err(|_| "stdout reader panicked".to_string())?
            .map_err(|e| e.to_string())?;
        let stderr = err_reader.join().unwrap_or_default();
        if !status.success() {
            let tail = String::from_utf8_lossy(&stderr);
            return Err(format!("runner exited with {status}: {}", tail.trim()));
        }
        let text = std::str::from_utf8(&stdout).map_err(|e| format!("non-UTF-8 output: {e}"))?;
        let mut stream = serde_json::Deserializer::from_str(text).into_iter::<ExecutionOutcome>();
        let outcome = match stream.next() {
            Some(Ok(o)) => o,
            Some(Err(e)) => return Err(format!("malformed runner output: {e}")),
            None => return Err("runner wrote nothing".into()),
        };
        if !text[stream.byte_offset()..].trim().is_empty() {
            return Err("runner wrote more than one object".into());
        }
        outcome.check()?;
        Ok(outcome)
    }
}

fn elapsed_ms(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

impl Executor for ProcessSandbox {
    fn run(&self, job: &ExecJob<'_>) -> ExecutionOutcome {
        let started = Instant::now();
        self.run_inner(job, started)
            .unwrap_or_else(|detail| ExecutionOutcome::failed(ExecStatus::SandboxFailure, detail, elapsed_ms(started)))
    }
}

/// A scripted outcome for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedOutcome {
    pub status: ExecStatus,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub detail: Option<String>,
    /// Whether the candidate passes the hidden tests.
    #[serde(default)]
    pub correct: bool,
}

impl ScriptedOutcome {
    pub fn ok(output: impl Into<String>, correct: bool) -> Self {
        Self {
            status: ExecStatus::Ok,
            output: Some(output.into()),
            detail: None,
            correct,
        }
    }

    pub fn error(detail: impl Into<String>) -> Self {
        Self {
            status: ExecStatus::RuntimeError,
            output: None,
            detail: Some(detail.into()),
            correct: false,
        }
    }
}

/// Fixture entry. Matches by index when `index` is set, otherwise by the
/// candidate text (trailing whitespace ignored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub task_id: String,
    #[serde(default)]
    pub index: Option<usize>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(flatten)]
    pub outcome: ScriptedOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockExecConfig {
    pub entries: Vec<MockEntry>,
    /// Used for candidates no entry matches; without it they are reported
    /// as sandbox failures.
    #[serde(default)]
    pub default: Option<ScriptedOutcome>,
}

impl MockExecConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExecError> {
        let path = path.as_ref();
        let fail = |message: String| ExecError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| fail(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }
}

/// Executor that answers from a fixture and never spawns a process.
#[derive(Debug, Clone)]
pub struct MockExecutor {
    by_index: HashMap<(String, usize), ScriptedOutcome>,
    by_text: HashMap<(String, String), ScriptedOutcome>,
    default: Option<ScriptedOutcome>,
}

impl MockExecutor {
    pub fn new(config: MockExecConfig) -> Self {
        let mut by_index = HashMap::new();
        let mut by_text = HashMap::new();
        for e in config.entries {
            if let Some(i) = e.index {
                by_index.insert((e.task_id.clone(), i), e.outcome.clone());
            }
            if let Some(t) = e.text {
                by_text.insert((e.task_id, t.trim_end().to_string()), e.outcome);
            }
        }
        Self {
            by_index,
            by_text,
            default: config.default,
        }
    }

    fn lookup(&self, job: &ExecJob<'_>) -> Option<&ScriptedOutcome> {
        self.by_index
            .get(&(job.task_id.to_string(), job.index))
            .or_else(|| {
                self.by_text
                    .get(&(job.task_id.to_string(), job.body.trim_end().to_string()))
            })
            .or(self.default.as_ref())
    }
}

impl Executor for MockExecutor {
    fn run(&self, job: &ExecJob<'_>) -> ExecutionOutcome {
        let Some(s) = self.lookup(job) else {
            return ExecutionOutcome::failed(
                ExecStatus::SandboxFailure,
                format!("no scripted outcome for {}#{}", job.task_id, job.index),
                0,
            );
        };
        match job.purpose {
            TestPurpose::Visible => ExecutionOutcome {
                status: s.status,
                output: s.output.clone().filter(|_| s.status == ExecStatus::Ok),
                duration_ms: 0,
                detail: s.detail.clone(),
            },
            TestPurpose::Hidden if s.correct => ExecutionOutcome::ok("True", 0),
            TestPurpose::Hidden if s.status == ExecStatus::Ok => {
                ExecutionOutcome::failed(ExecStatus::RuntimeError, "AssertionError", 0)
            }
            TestPurpose::Hidden => {
                ExecutionOutcome::failed(s.status, s.detail.clone().unwrap_or_else(|| "failed".into()), 0)
            }
        }
    }
}

fn job<'a>(
    candidate: &'a Candidate,
    task: &'a TaskInstance,
    test: &'a str,
    timeout_ms: u64,
    purpose: TestPurpose,
) -> ExecJob<'a> {
    ExecJob {
        task_id: &task.task_id,
        index: candidate.index,
        context: &task.context,
        body: &candidate.raw_text,
        test,
        timeout_ms,
        purpose,
    }
}

/// Runs the candidate with the task's visible test.
pub fn execute(
    executor: &dyn Executor,
    candidate: &Candidate,
    task: &TaskInstance,
    timeout_ms: u64,
) -> Result<ExecutionOutcome, ExecError> {
    let test = task
        .visible_test
        .as_deref()
        .ok_or_else(|| ExecError::NoVisibleTest(task.task_id.clone()))?;
    Ok(executor.run(&job(candidate, task, test, timeout_ms, TestPurpose::Visible)))
}

/// True when the candidate passes every hidden test. A test passes when it
/// runs cleanly and does not evaluate to `False`.
pub fn judge(
    executor: &dyn Executor,
    candidate: &Candidate,
    task: &TaskInstance,
    timeout_ms: u64,
) -> Result<bool, ExecError> {
    let tests = task.hidden_tests.as_slice();
    if tests.is_empty() {
        return Err(ExecError::NoHiddenTests(task.task_id.clone()));
    }
    Ok(tests.iter().all(|t| {
        let o = executor.run(&job(candidate, task, t, timeout_ms, TestPurpose::Hidden));
        o.is_ok() && o.output.as_deref().map(str::trim) != Some("False")
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub timeout_ms: u64,
    /// Concurrent executions; `None` uses one per CPU.
    pub concurrency: Option<usize>,
    /// Also compute hidden-test verdicts.
    pub judge: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            concurrency: None,
            judge: true,
        }
    }
}

/// Fills in `execution` (and `correct` when judging) for every candidate in
/// the pool that is not rejected and has no outcome yet.
pub fn execute_pool(
    executor: &dyn Executor,
    pool: &mut [Candidate],
    task: &TaskInstance,
    options: &ExecOptions,
) -> Result<(), ExecError> {
    if task.visible_test.is_none() {
        return Err(ExecError::NoVisibleTest(task.task_id.clone()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = options.concurrency {
        builder = builder.num_threads(n.max(1));
    }
    let workers = builder.build().map_err(|e| ExecError::Pool(e.to_string()))?;
    workers.install(|| {
        pool.par_iter_mut().try_for_each(|c| {
            if options.judge && c.correct.is_none() {
                c.correct = Some(judge(executor, c, task, options.timeout_ms)?);
            }
            if !c.is_rejected() && c.execution.is_none() {
                c.execution = Some(execute(executor, c, task, options.timeout_ms)?);
            }
            Ok(())
        })
    })
}

/// Keeps the non-rejected candidates that executed cleanly. When none did,
/// returns every non-rejected candidate and `true`.
pub fn executability_filter(pool: &[Candidate]) -> (Vec<Candidate>, bool) {
    let live: Vec<&Candidate> = pool.iter().filter(|c| !c.is_rejected()).collect();
    let kept: Vec<Candidate> = live
        .iter()
        .filter(|c| c.execution.as_ref().is_some_and(ExecutionOutcome::is_ok))
        .map(|c| (*c).clone())
        .collect();
    if kept.is_empty() && !live.is_empty() {
        (live.into_iter().cloned().collect(), true)
    } else {
        (kept, false)
    }
}
