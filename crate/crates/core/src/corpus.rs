//! Task corpora and candidate pools stored as line-delimited JSON.
//!
//! A tasks file holds one [`TaskInstance`] per line; a candidates file holds
//! one [`Candidate`] per line. Both loaders validate the record invariants and
//! report the offending line number on failure.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::ExecutionOutcome;
use crate::gateway::ScoreBundle;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate task_id `{0}`")]
    DuplicateTask(String),
    #[error("duplicate candidate ({task_id}, {index})")]
    DuplicateCandidate { task_id: String, index: usize },
    #[error("task `{task_id}`: {message}")]
    Invalid { task_id: String, message: String },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Language {
    PythonFunction,
    TaggedGeneric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    FunctionCompletion,
    Tagged,
}

/// One few-shot demonstration: context, instruction and reference program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoExample {
    pub context: String,
    pub instruction: String,
    pub program: String,
}

/// Correctness tests for a task.
///
/// The contents are readable only inside this crate (the evaluation module
/// uses them to judge candidates), so prompt construction and filtering
/// cannot leak them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HiddenTests(Vec<String>);

impl HiddenTests {
    pub fn new(tests: Vec<String>) -> Self {
        Self(tests)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn as_slice(&self) -> &[String] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub instruction: String,
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub demos: Vec<DemoExample>,
    pub language: Language,
    pub prompt_style: PromptStyle,
    #[serde(default)]
    pub visible_test: Option<String>,
    #[serde(default)]
    pub hidden_tests: HiddenTests,
}

impl TaskInstance {
    /// Name of the function defined by the context header, for
    /// function-completion tasks.
    pub fn function_name(&self) -> Option<&str> {
        function_headers(&self.context).into_iter().next()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: &str| CorpusError::Invalid {
            task_id: self.task_id.clone(),
            message: message.to_string(),
        };
        if self.task_id.is_empty() {
            return Err(invalid("empty task_id"));
        }
        if self.instruction.is_empty() {
            return Err(invalid("empty instruction"));
        }
        if self.prompt_style == PromptStyle::FunctionCompletion {
            let headers = function_headers(&self.context).len();
            if headers != 1 {
                return Err(invalid(&format!(
                    "function-completion context must contain exactly one function header, found {headers}"
                )));
            }
        }
        Ok(())
    }
}

/// Names of the functions declared by `def` lines in `source`.
pub(crate) fn function_headers(source: &str) -> Vec<&str> {
    source
        .lines()
        .filter_map(|line| {
            let rest = line.trim_start();
            let rest = rest.strip_prefix("async ").unwrap_or(rest);
            let rest = rest.strip_prefix("def ")?;
            let end = rest
                .find(|c: char| !(c.is_alphanumeric() || c == '_'))
                .unwrap_or(rest.len());
            let name = &rest[..end];
            (!name.is_empty() && rest[end..].trim_start().starts_with('(')).then_some(name)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    Empty,
    Trivial,
    Repetitive,
}

/// One sampled program together with everything later stages attach to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub task_id: String,
    pub index: usize,
    pub raw_text: String,
    pub canonical_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExecutionOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl Candidate {
    pub fn new(task_id: impl Into<String>, index: usize, raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        Self {
            task_id: task_id.into(),
            index,
            canonical_text: raw_text.clone(),
            raw_text,
            rejection: None,
            scores: None,
            execution: None,
            correct: None,
        }
    }

    pub fn is_rejected(&self) -> bool {
        self.rejection.is_some()
    }
}

/// All candidates sampled for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub task_id: String,
    pub candidates: Vec<Candidate>,
}

impl Pool {
    pub fn new(task_id: impl Into<String>, candidates: Vec<Candidate>) -> Self {
        Self {
            task_id: task_id.into(),
            candidates,
        }
    }

    pub fn get(&self, index: usize) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.index == index)
    }
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

fn write_records<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    // Write next to the destination and rename so readers never see a torn file.
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let file = File::create(&tmp).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    drop(out);
    fs::rename(&tmp, path).map_err(|source| {
        let _ = fs::remove_file(&tmp);
        io_err(source)
    })
}

/// Loads and validates a tasks file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>> {
    let tasks: Vec<TaskInstance> = read_records(path.as_ref())?;
    validate_corpus(&tasks)?;
    Ok(tasks)
}

pub fn save_corpus(tasks: &[TaskInstance], path: impl AsRef<Path>) -> Result<()> {
    write_records(tasks, path.as_ref())
}

pub fn validate_corpus(tasks: &[TaskInstance]) -> Result<()> {
    let mut seen = HashSet::new();
    for task in tasks {
        task.validate()?;
        if !seen.insert(task.task_id.as_str()) {
            return Err(CorpusError::DuplicateTask(task.task_id.clone()));
        }
    }
    // A corpus is either zero-shot throughout or few-shot throughout.
    if let Some(first) = tasks.first() {
        let few_shot = !first.demos.is_empty();
        if let Some(odd) = tasks.iter().find(|t| t.demos.is_empty() == few_shot) {
            return Err(CorpusError::Invalid {
                task_id: odd.task_id.clone(),
                message: "mixes zero-shot and few-shot tasks in one corpus".into(),
            });
        }
    }
    Ok(())
}

pub fn validate_pool(candidates: &[Candidate]) -> Result<()> {
    let mut seen = HashSet::new();
    for c in candidates {
        if !seen.insert((c.task_id.as_str(), c.index)) {
            return Err(CorpusError::DuplicateCandidate {
                task_id: c.task_id.clone(),
                index: c.index,
            });
        }
    }
    Ok(())
}

pub fn save_pool(candidates: &[Candidate], path: impl AsRef<Path>) -> Result<()> {
    validate_pool(candidates)?;
    write_records(candidates, path.as_ref())
}

pub fn load_pool(path: impl AsRef<Path>) -> Result<Vec<Candidate>> {
    let candidates: Vec<Candidate> = read_records(path.as_ref())?;
    validate_pool(&candidates)?;
    Ok(candidates)
}
