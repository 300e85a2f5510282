//! Sampling pools and attaching Coder, Reviewer and prior scores.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Candidate, TaskInstance};
use crate::evaluation::ProbePool;
use crate::filter::{apply_rejection, make_degenerate, DegenerateKind, RejectionConfig};
use crate::gateway::{Gateway, GatewayError, SampleRequest, ScoreBundle, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::prompt::{PromptBuilder, PromptError};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub type Result<T, E = ScoringError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Samples requested per backend call.
    pub batch: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            n: 125,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            batch: 25,
            seed: 0,
        }
    }
}

/// Draws `params.n` candidates for a task. Candidates whose completion came
/// back with log-probabilities already carry their Coder score.
pub fn sample_pool(
    gateway: &Gateway,
    builder: &PromptBuilder,
    task: &TaskInstance,
    params: &SamplingParams,
) -> Result<Vec<Candidate>> {
    let prompt = builder.build_coder_prompt(task)?;
    let batch = params.batch.max(1);
    let mut out = Vec::with_capacity(params.n);
    let mut call = 0u64;
    while out.len() < params.n {
        let n = batch.min(params.n - out.len());
        let request = SampleRequest {
            prompt: prompt.text.clone(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            n,
            stop_sequences: prompt.stop_sequences.clone(),
            seed: Some(params.seed.wrapping_add(call)),
        };
        for completion in gateway.sample(&request)? {
            let mut c = Candidate::new(task.task_id.clone(), out.len(), completion.text);
            c.scores = completion
                .scored
                .as_ref()
                .filter(|s| !s.is_empty())
                .map(ScoreBundle::coder);
            out.push(c);
        }
        call += 1;
    }
    Ok(out)
}

/// Which channels to compute beyond the Coder score.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoringOptions {
    pub reviewer: bool,
    pub prior: bool,
    pub rejection: RejectionConfig,
}

fn coder_score(gateway: &Gateway, prompt: &str, text: &str) -> Result<ScoreBundle> {
    if text.is_empty() {
        return Ok(ScoreBundle {
            coder_logp: 0.0,
            coder_len: 0,
            reviewer_logp: None,
            reviewer_len: None,
            prior_logp: None,
            prior_len: None,
        });
    }
    Ok(ScoreBundle::coder(&gateway.score_continuation(prompt, text)?))
}

fn fill_scores(
    gateway: &Gateway,
    builder: &PromptBuilder,
    task: &TaskInstance,
    coder_prompt: &str,
    prior_prompt: Option<&str>,
    reviewer: bool,
    c: &mut Candidate,
) -> Result<()> {
    if c.scores.is_none() {
        c.scores = Some(coder_score(gateway, coder_prompt, &c.raw_text)?);
    }
    if c.is_rejected() {
        return Ok(());
    }
    let mut bundle = c.scores.take().expect("set above");
    if reviewer && bundle.reviewer_logp.is_none() {
        let pkg = builder.build_reviewer_prompt(task, c)?;
        let (logp, len) = gateway.score_span(&pkg.text, pkg.scored_span)?;
        bundle.reviewer_logp = Some(logp);
        bundle.reviewer_len = Some(len);
    }
    if let Some(prompt) = prior_prompt {
        if bundle.prior_logp.is_none() && !c.raw_text.is_empty() {
            let scored = gateway.score_continuation(prompt, &c.raw_text)?;
            bundle.prior_logp = Some(scored.total_logprob());
            bundle.prior_len = Some(scored.len());
        }
    }
    c.scores = Some(bundle);
    Ok(())
}

/// Runs rejection on every candidate, then fills in missing scores. The
/// Coder score is computed for all candidates; Reviewer and prior scores
/// only for those that survive rejection.
pub fn score_pool(
    gateway: &Gateway,
    builder: &PromptBuilder,
    task: &TaskInstance,
    pool: &mut [Candidate],
    options: &ScoringOptions,
) -> Result<()> {
    let coder = builder.build_coder_prompt(task)?;
    let prior = if options.prior {
        Some(builder.build_prior_prompt(task)?)
    } else {
        None
    };
    pool.par_iter_mut().try_for_each(|c| {
        apply_rejection(c, task, &options.rejection);
        fill_scores(
            gateway,
            builder,
            task,
            &coder.text,
            prior.as_ref().map(|p| p.text.as_str()),
            options.reviewer,
            c,
        )
    })
}

/// Number of sampled candidates placed in each probe pool.
pub const PROBE_SAMPLES: usize = 25;

/// Builds the pool used to measure how rankers treat degenerate programs:
/// the first [`PROBE_SAMPLES`] non-blank candidates plus one of each
/// degenerate construct, all scored on their raw text with no renaming.
pub fn build_probe_pool(
    gateway: &Gateway,
    builder: &PromptBuilder,
    task: &TaskInstance,
    pool: &[Candidate],
    options: &ScoringOptions,
) -> Result<ProbePool> {
    let raw_builder = PromptBuilder {
        standardize_names: false,
        ..builder.clone()
    };
    let mut members: Vec<Candidate> = pool
        .iter()
        .filter(|c| !c.raw_text.trim().is_empty())
        .take(PROBE_SAMPLES)
        .map(|c| {
            let mut p = Candidate::new(c.task_id.clone(), c.index, c.raw_text.clone());
            p.scores = c.scores.as_ref().map(|s| ScoreBundle {
                reviewer_logp: None,
                reviewer_len: None,
                prior_logp: None,
                prior_len: None,
                ..s.clone()
            });
            p.correct = c.correct;
            p
        })
        .collect();
    let first = pool.iter().map(|c| c.index + 1).max().unwrap_or(0);
    let mut probes = BTreeMap::new();
    for (index, kind) in (first..).zip(DegenerateKind::ALL) {
        let mut c = make_degenerate(kind, task);
        c.index = index;
        c.correct = Some(false);
        probes.insert(kind, index);
        members.push(c);
    }
    let coder = raw_builder.build_coder_prompt(task)?;
    let prior = if options.prior {
        Some(raw_builder.build_prior_prompt(task)?)
    } else {
        None
    };
    members.par_iter_mut().try_for_each(|c| {
        fill_scores(
            gateway,
            &raw_builder,
            task,
            &coder.text,
            prior.as_ref().map(|p| p.text.as_str()),
            options.reviewer,
            c,
        )
    })?;
    Ok(ProbePool {
        task_id: task.task_id.clone(),
        candidates: members,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{HiddenTests, Language, PromptStyle};
    use crate::gateway::{MockBackend, MockConfig, MockProgram, MockTask};
    use std::sync::Arc;

    fn task() -> TaskInstance {
        TaskInstance {
            task_id: "t/0".into(),
            instruction: "Return the sum of a and b.".into(),
            context: "def add(a, b):\n    \"\"\"Return the sum of a and b.\"\"\"\n".into(),
            demos: vec![],
            language: Language::PythonFunction,
            prompt_style: PromptStyle::FunctionCompletion,
            visible_test: Some("add(1, 2)".into()),
            hidden_tests: HiddenTests::new(vec!["add(2, 2) == 4".into()]),
        }
    }

    fn backend() -> Arc<MockBackend> {
        Arc::new(MockBackend::new(MockConfig {
            tasks: vec![MockTask {
                prompt_contains: "def add(a, b):".into(),
                programs: vec![
                    MockProgram {
                        text: "    return a + b\n".into(),
                        weight: 2.0,
                    },
                    MockProgram {
                        text: "    return\n".into(),
                        weight: 1.0,
                    },
                    MockProgram {
                        text: "    # sum of a and b\n    return a - b\n".into(),
                        weight: 1.0,
                    },
                ],
            }],
            ..MockConfig::default()
        }))
    }

    #[test]
    fn sampling_fills_pool_in_batches() {
        let gw = Gateway::new(backend());
        let params = SamplingParams {
            n: 7,
            batch: 3,
            ..SamplingParams::default()
        };
        let pool = sample_pool(&gw, &PromptBuilder::default(), &task(), &params).unwrap();
        assert_eq!(pool.len(), 7);
        assert!(pool.iter().enumerate().all(|(i, c)| c.index == i && c.scores.is_some()));
        assert_eq!(
            pool,
            sample_pool(&gw, &PromptBuilder::default(), &task(), &params).unwrap()
        );
    }

    #[test]
    fn rejected_candidates_get_no_reviewer_calls() {
        let b = backend();
        let gw = Gateway::new(b.clone());
        let mut pool = vec![
            Candidate::new("t/0", 0, "    return a + b\n"),
            Candidate::new("t/0", 1, "    return\n"),
        ];
        let opts = ScoringOptions {
            reviewer: true,
            ..ScoringOptions::default()
        };
        score_pool(&gw, &PromptBuilder::default(), &task(), &mut pool, &opts).unwrap();
        // Two Coder calls and one echo for the surviving Reviewer prompt.
        assert_eq!(b.calls(), 3);
        assert!(pool[0].scores.as_ref().unwrap().reviewer().is_some());
        assert!(pool[1].is_rejected());
        assert!(pool[1].scores.as_ref().unwrap().reviewer().is_none());
    }

    #[test]
    fn rescoring_is_a_no_op() {
        let b = backend();
        let gw = Gateway::new(b.clone());
        let mut pool = vec![Candidate::new("t/0", 0, "    return a + b\n")];
        let opts = ScoringOptions {
            reviewer: true,
            prior: true,
            ..ScoringOptions::default()
        };
        score_pool(&gw, &PromptBuilder::default(), &task(), &mut pool, &opts).unwrap();
        let before = b.calls();
        let snapshot = pool.clone();
        score_pool(&gw, &PromptBuilder::default(), &task(), &mut pool, &opts).unwrap();
        assert_eq!(b.calls(), before);
        assert_eq!(pool, snapshot);
        assert!(pool[0].scores.as_ref().unwrap().prior().is_some());
    }

    #[test]
    fn probe_pool_appends_constructs_after_pool() {
        let gw = Gateway::new(backend());
        let b = PromptBuilder::default();
        let mut pool = sample_pool(
            &gw,
            &b,
            &task(),
            &SamplingParams {
                n: 30,
                ..SamplingParams::default()
            },
        )
        .unwrap();
        let opts = ScoringOptions {
            reviewer: true,
            ..ScoringOptions::default()
        };
        score_pool(&gw, &b, &task(), &mut pool, &opts).unwrap();
        let probe = build_probe_pool(&gw, &b, &task(), &pool, &opts).unwrap();
        assert_eq!(probe.candidates.len(), PROBE_SAMPLES + 3);
        assert_eq!(probe.probes.values().copied().collect::<Vec<_>>(), vec![30, 31, 32]);
        assert!(probe
            .candidates
            .iter()
            .all(|c| c.scores.as_ref().unwrap().reviewer().is_some()));
        assert!(probe.candidates.iter().all(|c| !c.is_rejected()));
    }
}
