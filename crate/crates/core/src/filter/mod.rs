//! Degenerate-sample rejection and source canonicalization.
//!
//! Three procedures run before any ranking:
//!
//! * empty programs, and for function completion bodies that are only a bare
//!   `return` or `pass`, are rejected;
//! * programs whose zlib-compressed form is more than `compress_ratio_threshold`
//!   times shorter than the original are rejected as repetitive;
//! * Python candidates are canonicalized (comments and docstrings removed,
//!   print and assertion messages blanked, function name standardized) so
//!   that the Reviewer cannot be swayed by surface overlap with the
//!   instruction.
//!
//! Order matters: canonicalize, test the canonical text for emptiness, then
//! test the raw sample for repetition.

pub mod lexer;

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::corpus::{Candidate, Language, PromptStyle, Rejection, TaskInstance};
use lexer::{lex, Kind, LexError, Token};

pub const CANONICAL_FN_NAME: &str = "candidate_fn";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RejectionConfig {
    pub compress_ratio_threshold: f64,
    pub trivial_patterns_enabled: bool,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            compress_ratio_threshold: 4.0,
            trivial_patterns_enabled: true,
        }
    }
}

impl RejectionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.compress_ratio_threshold > 1.0 {
            Ok(())
        } else {
            Err(format!(
                "compress_ratio_threshold must exceed 1, got {}",
                self.compress_ratio_threshold
            ))
        }
    }
}

/// Raw byte length over zlib-compressed byte length (default level).
pub fn compression_ratio(text: &str) -> f64 {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(text.as_bytes()).expect("writing to a Vec cannot fail");
    let compressed = enc.finish().expect("writing to a Vec cannot fail");
    text.len() as f64 / compressed.len() as f64
}

pub fn reject_repetitive(candidate: &Candidate, config: &RejectionConfig) -> Option<Rejection> {
    (!candidate.raw_text.is_empty() && compression_ratio(&candidate.raw_text) > config.compress_ratio_threshold)
        .then_some(Rejection::Repetitive)
}

/// Checks the canonical text for emptiness and, on function-completion
/// tasks, for bodies made only of bare `return` / `pass` statements.
pub fn reject_empty_or_trivial(
    candidate: &Candidate,
    task: &TaskInstance,
    config: &RejectionConfig,
) -> Option<Rejection> {
    let text = &candidate.canonical_text;
    if text.trim().is_empty() {
        return Some(Rejection::Empty);
    }
    if config.trivial_patterns_enabled && task.prompt_style == PromptStyle::FunctionCompletion && is_trivial_body(text)
    {
        return Some(Rejection::Trivial);
    }
    None
}

fn is_trivial_body(text: &str) -> bool {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().trim_end_matches(';').trim())
        .filter(|l| !l.is_empty())
        .all(|l| l == "return" || l == "pass")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canonicalized {
    pub text: String,
    /// False when the source could not be lexed and was returned unchanged.
    pub lexed: bool,
}

/// Canonical form of a candidate program. Non-Python tasks pass through.
pub fn canonicalize(source: &str, task: &TaskInstance) -> Canonicalized {
    if task.language != Language::PythonFunction {
        return Canonicalized {
            text: source.to_string(),
            lexed: true,
        };
    }
    let rename = match task.prompt_style {
        PromptStyle::FunctionCompletion => task.function_name(),
        PromptStyle::Tagged => None,
    };
    match canonicalize_python(source, rename) {
        Ok(text) => Canonicalized { text, lexed: true },
        Err(e) => {
            log::debug!("task {}: leaving candidate unchanged: {e}", task.task_id);
            Canonicalized {
                text: source.to_string(),
                lexed: false,
            }
        }
    }
}

/// Owned token after rewriting.
struct Piece<'a> {
    kind: Kind,
    text: std::borrow::Cow<'a, str>,
}

pub fn canonicalize_python(source: &str, rename: Option<&str>) -> Result<String, LexError> {
    let tokens: Vec<Token<'_>> = lex(source)?.into_iter().filter(|t| t.kind != Kind::Comment).collect();
    let mut blank = vec![false; tokens.len()];
    mark_print_strings(&tokens, &mut blank);

    // Walk logical lines: drop docstring statements, blank assert messages.
    let mut drop = vec![false; tokens.len()];
    let mut line_start = 0;
    for i in 0..=tokens.len() {
        let at_end = i == tokens.len();
        if at_end || tokens[i].kind == (Kind::Newline { logical: true }) {
            let line = line_start..i;
            let significant: Vec<usize> = line.clone().filter(|&j| !tokens[j].is_trivia()).collect();
            if !significant.is_empty() && significant.iter().all(|&j| tokens[j].kind == Kind::Str) {
                for j in line.clone() {
                    drop[j] = true;
                }
            } else if significant
                .first()
                .is_some_and(|&j| tokens[j].text == "assert" && tokens[j].kind == Kind::Name)
            {
                let base = tokens[significant[0]].depth;
                if let Some(&comma) = significant
                    .iter()
                    .find(|&&j| tokens[j].text == "," && tokens[j].depth == base)
                {
                    for &j in significant.iter().filter(|&&j| j > comma) {
                        if tokens[j].kind == Kind::Str && tokens[j].depth == base {
                            blank[j] = true;
                        }
                    }
                }
            }
            line_start = i + 1;
        }
    }

    let mut pieces: Vec<Piece<'_>> = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        if drop[i] && !matches!(tok.kind, Kind::Newline { .. }) {
            continue;
        }
        if blank[i] {
            // Collapse implicitly concatenated literals into one empty string.
            let prev_blank = pieces
                .iter()
                .rev()
                .find(|p| p.kind != Kind::Space)
                .is_some_and(|p| p.kind == Kind::Str && p.text == "\"\"");
            if prev_blank && i > 0 && (tokens[i - 1].kind == Kind::Space || blank[i - 1]) {
                while pieces.last().is_some_and(|p| p.kind == Kind::Space) {
                    pieces.pop();
                }
                continue;
            }
            pieces.push(Piece {
                kind: Kind::Str,
                text: "\"\"".into(),
            });
            continue;
        }
        let renamed = tok.kind == Kind::Name
            && rename == Some(tok.text)
            && !prev_significant(&tokens, i).is_some_and(|p| p.text == ".");
        let text = if renamed {
            CANONICAL_FN_NAME.into()
        } else {
            tok.text.into()
        };
        pieces.push(Piece { kind: tok.kind, text });
    }
    Ok(join_lines(&pieces))
}

fn prev_significant<'t, 'a>(tokens: &'t [Token<'a>], i: usize) -> Option<&'t Token<'a>> {
    tokens[..i].iter().rev().find(|t| !t.is_trivia())
}

/// Marks string literals passed directly as arguments to `print(...)`.
fn mark_print_strings(tokens: &[Token<'_>], blank: &mut [bool]) {
    for i in 0..tokens.len() {
        let t = &tokens[i];
        if t.kind != Kind::Name || t.text != "print" {
            continue;
        }
        if prev_significant(tokens, i).is_some_and(|p| p.text == "." || p.text == "def") {
            continue;
        }
        let Some(open) = (i + 1..tokens.len()).find(|&j| tokens[j].kind != Kind::Space) else {
            continue;
        };
        if tokens[open].text != "(" {
            continue;
        }
        let inner = tokens[open].depth + 1;
        for j in open + 1..tokens.len() {
            if tokens[j].text == ")" && tokens[j].depth == tokens[open].depth {
                break;
            }
            if tokens[j].kind == Kind::Str && tokens[j].depth == inner {
                blank[j] = true;
            }
        }
    }
}

/// Joins pieces, dropping whitespace-only physical lines and trailing
/// whitespace.
fn join_lines(pieces: &[Piece<'_>]) -> String {
    let mut out = String::new();
    let mut line: Vec<&Piece<'_>> = Vec::new();
    let flush = |line: &mut Vec<&Piece<'_>>, out: &mut String, newline: Option<&str>| {
        while line.last().is_some_and(|p| p.kind == Kind::Space) {
            line.pop();
        }
        if !line.iter().all(|p| p.kind == Kind::Space) {
            for p in line.iter() {
                out.push_str(&p.text);
            }
            if let Some(nl) = newline {
                out.push_str(nl);
            }
        }
        line.clear();
    };
    for p in pieces {
        if matches!(p.kind, Kind::Newline { .. }) {
            flush(&mut line, &mut out, Some(&p.text));
        } else {
            line.push(p);
        }
    }
    flush(&mut line, &mut out, None);
    out
}

/// Canonicalizes the candidate, then applies the empty/trivial check to the
/// canonical text and the repetition check to the raw text. Returns whether
/// canonicalization succeeded.
pub fn apply_rejection(candidate: &mut Candidate, task: &TaskInstance, config: &RejectionConfig) -> bool {
    let canon = canonicalize(&candidate.raw_text, task);
    candidate.canonical_text = canon.text;
    candidate.rejection =
        reject_empty_or_trivial(candidate, task, config).or_else(|| reject_repetitive(candidate, config));
    canon.lexed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegenerateKind {
    ReturnOnly,
    Repetitive,
    CopyPrompt,
}

impl DegenerateKind {
    pub const ALL: [DegenerateKind; 3] = [Self::ReturnOnly, Self::Repetitive, Self::CopyPrompt];

    pub fn name(self) -> &'static str {
        match self {
            Self::ReturnOnly => "return-only",
            Self::Repetitive => "repetitive",
            Self::CopyPrompt => "copy-prompt",
        }
    }
}

/// Builds one of the three probe programs for a function-completion task.
/// The returned candidate has index 0 and no canonicalization applied.
pub fn make_degenerate(kind: DegenerateKind, task: &TaskInstance) -> Candidate {
    let body = match kind {
        DegenerateKind::ReturnOnly => "    return\n".to_string(),
        DegenerateKind::Repetitive => (1..=50).map(|i| format!("    print({i})\n")).collect(),
        DegenerateKind::CopyPrompt => {
            let lines: Vec<&str> = task.instruction.trim().lines().map(str::trim).collect();
            format!("    # {}\n", lines.join("\n    # "))
        }
    };
    Candidate::new(task.task_id.clone(), 0, body)
}
