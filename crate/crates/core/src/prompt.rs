//! Coder, Reviewer and prior prompt construction.
//!
//! The Coder prompt places context and instruction before the program slot.
//! The Reviewer prompt inverts that order so the instruction can be scored
//! conditioned on a sampled program; its [`PromptPackage::scored_span`]
//! marks the instruction bytes whose token log-probabilities are summed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Candidate, PromptStyle, TaskInstance};
use crate::filter::CANONICAL_FN_NAME;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("task `{task_id}`: {message}")]
    Unsupported { task_id: String, message: String },
    #[error("task `{0}`: candidate body is empty")]
    EmptyBody(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Coder,
    Reviewer,
    Prior,
}

/// Half-open byte range into a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }
}

/// A fully rendered prompt.
///
/// For Coder and prior prompts the span is empty and sits at the end of the
/// text: the scored segment is the continuation appended after it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPackage {
    pub text: String,
    pub scored_span: Span,
    pub channel: Channel,
    pub stop_sequences: Vec<String>,
}

impl PromptPackage {
    pub fn scored_text(&self) -> &str {
        &self.text[self.scored_span.start..self.scored_span.end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub open: String,
    pub close: String,
}

impl Tag {
    fn new(name: &str) -> Self {
        Self {
            open: format!("<{name}>"),
            close: format!("</{name}>"),
        }
    }

    fn wrap(&self, body: &str) -> String {
        format!("{}{}{}", self.open, body, self.close)
    }
}

/// Tag strings used by the task-agnostic few-shot layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagScheme {
    pub context: Tag,
    pub instruction: Tag,
    pub program: Tag,
}

impl Default for TagScheme {
    fn default() -> Self {
        Self {
            context: Tag::new("info"),
            instruction: Tag::new("text"),
            program: Tag::new("code"),
        }
    }
}

pub const REVIEWER_CUE: &str = "write the docstring for the above function";

const FUNCTION_STOPS: [&str; 5] = ["\ndef ", "\nclass ", "\nif __name__", "\nprint(", "\n#"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBuilder {
    pub tags: TagScheme,
    /// Line comment marker used for the Reviewer cue.
    pub comment_marker: String,
    /// Rename the function in the Reviewer prompt's header copies to the
    /// canonical name, matching bodies produced by canonicalization.
    pub standardize_names: bool,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self {
            tags: TagScheme::default(),
            comment_marker: "#".into(),
            standardize_names: true,
        }
    }
}

impl PromptBuilder {
    pub fn build_coder_prompt(&self, task: &TaskInstance) -> Result<PromptPackage> {
        match task.prompt_style {
            PromptStyle::FunctionCompletion => {
                reject_demos(task)?;
                let (context, _) = split_context(&task.context);
                let mut text = context;
                text.push_str(&docstring(&header_indent(&text), &task.instruction).0);
                Ok(tail_package(text, Channel::Coder, function_stops()))
            }
            PromptStyle::Tagged => {
                let mut blocks: Vec<String> = task
                    .demos
                    .iter()
                    .map(|d| {
                        let mut parts = self.context_part(&d.context);
                        parts.push(self.tags.instruction.wrap(&d.instruction));
                        parts.push(self.tags.program.wrap(&d.program));
                        parts.join("\n")
                    })
                    .collect();
                let mut parts = self.context_part(&task.context);
                parts.push(self.tags.instruction.wrap(&task.instruction));
                parts.push(self.tags.program.open.clone());
                blocks.push(parts.join("\n"));
                let stops = vec![self.tags.program.close.clone()];
                Ok(tail_package(blocks.join("\n\n"), Channel::Coder, stops))
            }
        }
    }

    /// Reviewer prompt for a candidate, using its canonical text as the body.
    pub fn build_reviewer_prompt(&self, task: &TaskInstance, candidate: &Candidate) -> Result<PromptPackage> {
        let body = candidate.canonical_text.trim_end();
        if body.trim().is_empty() {
            return Err(PromptError::EmptyBody(task.task_id.clone()));
        }
        match task.prompt_style {
            PromptStyle::FunctionCompletion => {
                reject_demos(task)?;
                let (context, header_start) = split_context(&task.context);
                let mut context = context;
                if self.standardize_names {
                    if let Some(name) = task.function_name() {
                        context = rename_in_header(&context, header_start, name);
                    }
                }
                let header = context[header_start..].to_string();
                let mut text = context;
                text.push_str(body);
                text.push('\n');
                text.push_str(&format!("{} {}\n", self.comment_marker, REVIEWER_CUE));
                text.push_str(&header);
                let (doc, offset) = docstring(&header_indent(&header), &task.instruction);
                let start = text.len() + offset;
                text.push_str(&doc);
                let span = Span::new(start, start + task.instruction.len());
                Ok(PromptPackage {
                    text,
                    scored_span: span,
                    channel: Channel::Reviewer,
                    stop_sequences: function_stops(),
                })
            }
            PromptStyle::Tagged => {
                let mut blocks: Vec<String> = task
                    .demos
                    .iter()
                    .map(|d| {
                        let mut parts = self.context_part(&d.context);
                        parts.push(self.tags.program.wrap(&d.program));
                        parts.push(self.tags.instruction.wrap(&d.instruction));
                        parts.join("\n")
                    })
                    .collect();
                let mut parts = self.context_part(&task.context);
                parts.push(self.tags.program.wrap(body));
                parts.push(self.tags.instruction.open.clone());
                blocks.push(parts.join("\n"));
                let mut text = blocks.join("\n\n");
                let start = text.len();
                text.push_str(&task.instruction);
                let end = text.len();
                text.push_str(&self.tags.instruction.close);
                Ok(PromptPackage {
                    text,
                    scored_span: Span::new(start, end),
                    channel: Channel::Reviewer,
                    stop_sequences: vec![self.tags.instruction.close.clone()],
                })
            }
        }
    }

    /// Prompt for the unconditional program likelihood: the header with its
    /// docstring removed.
    pub fn build_prior_prompt(&self, task: &TaskInstance) -> Result<PromptPackage> {
        if task.prompt_style != PromptStyle::FunctionCompletion {
            return Err(PromptError::Unsupported {
                task_id: task.task_id.clone(),
                message: "prior prompts are defined for function-completion tasks only".into(),
            });
        }
        reject_demos(task)?;
        let (context, _) = split_context(&task.context);
        Ok(tail_package(context, Channel::Prior, function_stops()))
    }

    fn context_part(&self, context: &str) -> Vec<String> {
        if context.is_empty() {
            Vec::new()
        } else {
            vec![self.tags.context.wrap(context)]
        }
    }
}

fn function_stops() -> Vec<String> {
    FUNCTION_STOPS.iter().map(|s| s.to_string()).collect()
}

fn tail_package(text: String, channel: Channel, stop_sequences: Vec<String>) -> PromptPackage {
    let end = text.len();
    PromptPackage {
        text,
        scored_span: Span::new(end, end),
        channel,
        stop_sequences,
    }
}

fn reject_demos(task: &TaskInstance) -> Result<()> {
    if task.demos.is_empty() {
        Ok(())
    } else {
        Err(PromptError::Unsupported {
            task_id: task.task_id.clone(),
            message: "function-completion prompts do not take demonstrations".into(),
        })
    }
}

/// Renders a docstring block; returns it with the byte offset of the
/// instruction inside it.
fn docstring(indent: &str, instruction: &str) -> (String, usize) {
    let open = format!("{indent}\"\"\"");
    let offset = open.len();
    (format!("{open}{instruction}\n{indent}\"\"\"\n"), offset)
}

/// Body indentation for the last `def` header in `source`.
fn header_indent(source: &str) -> String {
    let base = source
        .lines()
        .rev()
        .find(|l| {
            let t = l.trim_start();
            t.starts_with("def ") || t.starts_with("async def ")
        })
        .map(|l| &l[..l.len() - l.trim_start().len()])
        .unwrap_or("");
    format!("{base}    ")
}

/// Removes a docstring directly beneath the function header. Returns the
/// context (terminated by one newline) and the byte offset of the `def` line.
pub(crate) fn split_context(context: &str) -> (String, usize) {
    let mut lines: Vec<&str> = context.split_inclusive('\n').collect();
    let def_line = lines.iter().position(|l| {
        let t = l.trim_start();
        t.starts_with("def ") || t.starts_with("async def ")
    });
    if let Some(def_idx) = def_line {
        // The header may span several lines; it ends at the first line whose
        // code ends with ':'.
        let header_end = (def_idx..lines.len())
            .find(|&i| lines[i].trim_end().ends_with(':'))
            .unwrap_or(def_idx);
        let mut i = header_end + 1;
        while i < lines.len() && lines[i].trim().is_empty() {
            i += 1;
        }
        if i < lines.len() {
            if let Some(end) = docstring_extent(&lines[i..]) {
                lines.drain(header_end + 1..i + end);
            }
        }
    }
    let mut out: String = lines.concat();
    let trimmed = out.trim_end().len();
    out.truncate(trimmed);
    if !out.is_empty() {
        out.push('\n');
    }
    let header_start = def_line
        .map(|idx| lines[..idx].iter().map(|l| l.len()).sum())
        .unwrap_or(0);
    (out, header_start)
}

/// Number of lines occupied by a docstring starting at `lines[0]`.
fn docstring_extent(lines: &[&str]) -> Option<usize> {
    let first = lines[0].trim_start();
    let first = first.trim_start_matches(['r', 'R', 'u', 'U']);
    let quote = ["\"\"\"", "'''", "\"", "'"]
        .into_iter()
        .find(|q| first.starts_with(q))?;
    let rest = &first[quote.len()..];
    if rest.contains(quote) {
        return Some(1);
    }
    if quote.len() == 1 {
        return None;
    }
    lines[1..].iter().position(|l| l.contains(quote)).map(|p| p + 2)
}

fn rename_in_header(context: &str, header_start: usize, name: &str) -> String {
    let (head, tail) = context.split_at(header_start);
    let renamed = tail.replacen(&format!("def {name}"), &format!("def {CANONICAL_FN_NAME}"), 1);
    format!("{head}{renamed}")
}
