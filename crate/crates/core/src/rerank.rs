//! Selection objectives over a candidate pool.
//!
//! Every score-based method ranks by descending score with ties broken by
//! ascending candidate index. Rejected candidates never appear in a ranking.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Candidate;
use crate::executor::{executability_filter, ExecStatus};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankError {
    #[error("candidate {index}: method {method} needs the {channel} channel")]
    MissingChannel {
        index: usize,
        method: Method,
        channel: &'static str,
    },
    #[error("method {0} does not score candidates independently")]
    NotPointwise(Method),
    #[error("no candidates left to rank")]
    EmptyPool,
    #[error("candidate {0} has no execution outcome")]
    MissingExecution(usize),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Random,
    Coder,
    NCoder,
    Reviewer,
    NReviewer,
    CoderReviewer,
    NCoderReviewer,
    WeightedMmi,
    Alternate,
    NAlternate,
    MbrExec,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Random,
        Method::Coder,
        Method::NCoder,
        Method::Reviewer,
        Method::NReviewer,
        Method::CoderReviewer,
        Method::NCoderReviewer,
        Method::WeightedMmi,
        Method::Alternate,
        Method::NAlternate,
        Method::MbrExec,
    ];

    /// The baseline and proposed methods reported side by side.
    pub const STANDARD: [Method; 7] = [
        Method::Random,
        Method::Coder,
        Method::NCoder,
        Method::Reviewer,
        Method::CoderReviewer,
        Method::NCoderReviewer,
        Method::MbrExec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Coder => "coder",
            Method::NCoder => "n-coder",
            Method::Reviewer => "reviewer",
            Method::NReviewer => "n-reviewer",
            Method::CoderReviewer => "coder-reviewer",
            Method::NCoderReviewer => "n-coder-reviewer",
            Method::WeightedMmi => "weighted-mmi",
            Method::Alternate => "alternate",
            Method::NAlternate => "n-alternate",
            Method::MbrExec => "mbr-exec",
        }
    }

    pub fn needs_reviewer(self) -> bool {
        matches!(
            self,
            Method::Reviewer | Method::NReviewer | Method::CoderReviewer | Method::NCoderReviewer | Method::WeightedMmi
        )
    }

    pub fn needs_prior(self) -> bool {
        matches!(self, Method::Alternate | Method::NAlternate)
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, Method::WeightedMmi | Method::Alternate | Method::NAlternate)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| RankError::UnknownMethod(s.to_string()))
    }
}

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankerSpec {
    pub method: Method,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl RankerSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Display label; includes α for the methods that use it.
    pub fn label(&self) -> String {
        if self.method.uses_alpha() {
            format!("{}@{}", self.method, self.alpha)
        } else {
            self.method.to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Best first.
    pub entries: Vec<RankedEntry>,
}

impl Ranking {
    pub fn selected(&self) -> usize {
        self.entries[0].index
    }

    pub fn order(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    /// One-based rank of a candidate index.
    pub fn rank_of(&self, index: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.index == index).map(|p| p + 1)
    }
}

/// Pointwise score of one candidate.
pub fn score(spec: &RankerSpec, candidate: &Candidate) -> Result<f64, RankError> {
    let missing = |channel| RankError::MissingChannel {
        index: candidate.index,
        method: spec.method,
        channel,
    };
    let scores = candidate.scores.as_ref().ok_or_else(|| missing("coder"))?;
    let coder = scores.coder_logp;
    let n_coder = coder / scores.coder_len.max(1) as f64;
    let reviewer = || scores.reviewer().ok_or_else(|| missing("reviewer"));
    let prior = || scores.prior().ok_or_else(|| missing("prior"));
    let a = spec.alpha;
    Ok(match spec.method {
        Method::Coder => coder,
        Method::NCoder => n_coder,
        Method::Reviewer => reviewer()?.0,
        Method::NReviewer => {
            let (r, n) = reviewer()?;
            r / n.max(1) as f64
        }
        Method::CoderReviewer => coder + reviewer()?.0,
        Method::NCoderReviewer => {
            let (r, n) = reviewer()?;
            n_coder + r / n.max(1) as f64
        }
        Method::WeightedMmi => (1.0 - a) * coder + a * reviewer()?.0,
        Method::Alternate => coder - a * prior()?.0,
        Method::NAlternate => {
            let (p, n) = prior()?;
            n_coder - a * p / n.max(1) as f64
        }
        Method::Random | Method::MbrExec => return Err(RankError::NotPointwise(spec.method)),
    })
}

fn by_score_then_index(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Ranks the non-rejected candidates of `pool`.
pub fn rank(spec: &RankerSpec, pool: &[Candidate]) -> Result<Ranking, RankError> {
    let live: Vec<&Candidate> = pool.iter().filter(|c| !c.is_rejected()).collect();
    if live.is_empty() {
        return Err(RankError::EmptyPool);
    }
    match spec.method {
        Method::MbrExec => mbr_exec_select(pool),
        Method::Random => {
            let mut indices: Vec<usize> = live.iter().map(|c| c.index).collect();
            indices.sort_unstable();
            indices.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let n = indices.len();
            Ok(Ranking {
                entries: indices
                    .into_iter()
                    .enumerate()
                    .map(|(pos, index)| RankedEntry {
                        index,
                        score: (n - pos) as f64,
                    })
                    .collect(),
            })
        }
        _ => {
            let mut entries = live
                .iter()
                .map(|c| {
                    Ok(RankedEntry {
                        index: c.index,
                        score: score(spec, c)?,
                    })
                })
                .collect::<Result<Vec<_>, RankError>>()?;
            entries.sort_by(by_score_then_index);
            Ok(Ranking { entries })
        }
    }
}

/// Relative tolerance for numeric tokens in output comparison.
pub const OUTPUT_REL_TOL: f64 = 1e-6;

/// Splits an output into numeric and non-numeric runs.
fn output_tokens(s: &str) -> Vec<Result<f64, &str>> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    let mut text_start = 0;
    while i < bytes.len() {
        let starts_number = bytes[i].is_ascii_digit()
            || ((bytes[i] == b'-' || bytes[i] == b'.')
                && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit() || *b == b'.'));
        let after_word = i > 0 && (bytes[i - 1].is_ascii_alphanumeric() || bytes[i - 1] == b'_');
        if starts_number && !after_word {
            let mut j = i + 1;
            while j < bytes.len() {
                let b = bytes[j];
                let exp_sign = (b == b'-' || b == b'+') && matches!(bytes[j - 1], b'e' | b'E');
                if b.is_ascii_digit() || b == b'.' || b == b'e' || b == b'E' || exp_sign {
                    j += 1;
                } else {
                    break;
                }
            }
            if let Ok(v) = s[i..j].parse::<f64>() {
                if text_start < i {
                    out.push(Err(&s[text_start..i]));
                }
                out.push(Ok(v));
                i = j;
                text_start = j;
                continue;
            }
        }
        i += 1;
    }
    if text_start < s.len() {
        out.push(Err(&s[text_start..]));
    }
    out
}

/// Output equivalence for MBR: identical text, except numbers compare at
/// relative tolerance [`OUTPUT_REL_TOL`].
pub fn outputs_equivalent(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    let (ta, tb) = (output_tokens(a.trim()), output_tokens(b.trim()));
    ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|(x, y)| match (x, y) {
            (Ok(x), Ok(y)) => x == y || (x - y).abs() <= OUTPUT_REL_TOL * x.abs().max(y.abs()),
            (Err(x), Err(y)) => x == y,
            _ => false,
        })
}

fn agrees(a: &Candidate, b: &Candidate) -> bool {
    if a.index == b.index {
        return true;
    }
    match (&a.execution, &b.execution) {
        (Some(x), Some(y)) if x.status == ExecStatus::Ok && y.status == ExecStatus::Ok => {
            match (&x.output, &y.output) {
                (Some(p), Some(q)) => outputs_equivalent(p, q),
                _ => false,
            }
        }
        _ => false,
    }
}

/// Minimum-Bayes-risk selection on execution outputs: each candidate scores
/// the number of candidates (itself included) whose output it matches.
/// Failed executions only agree with themselves.
pub fn mbr_exec_select(pool: &[Candidate]) -> Result<Ranking, RankError> {
    let live: Vec<&Candidate> = pool.iter().filter(|c| !c.is_rejected()).collect();
    if live.is_empty() {
        return Err(RankError::EmptyPool);
    }
    if let Some(c) = live.iter().find(|c| c.execution.is_none()) {
        return Err(RankError::MissingExecution(c.index));
    }
    let mut entries: Vec<RankedEntry> = live
        .iter()
        .map(|c| RankedEntry {
            index: c.index,
            score: live.iter().filter(|o| agrees(c, o)).count() as f64,
        })
        .collect();
    entries.sort_by(by_score_then_index);
    Ok(Ranking { entries })
}

/// Why a selection did not come from the full filtered pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fallbacks {
    /// Every candidate was rejected; the lowest index was taken.
    pub all_rejected: bool,
    /// No candidate executed cleanly; the unfiltered pool was ranked.
    pub exec_filter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub score: Option<f64>,
    pub fallbacks: Fallbacks,
}

/// Full selection pipeline on one pool: drop rejected candidates, optionally
/// keep only cleanly executing ones, then rank.
pub fn select(spec: &RankerSpec, pool: &[Candidate], exec_filter: bool) -> Result<Selection, RankError> {
    if pool.is_empty() {
        return Err(RankError::EmptyPool);
    }
    let mut fallbacks = Fallbacks::default();
    if pool.iter().all(Candidate::is_rejected) {
        fallbacks.all_rejected = true;
        let index = pool.iter().map(|c| c.index).min().expect("pool is non-empty");
        return Ok(Selection {
            index,
            score: None,
            fallbacks,
        });
    }
    let ranking = if exec_filter {
        let (kept, fell_back) = executability_filter(pool);
        fallbacks.exec_filter = fell_back;
        rank(spec, &kept)?
    } else {
        rank(spec, pool)?
    };
    Ok(Selection {
        index: ranking.selected(),
        score: Some(ranking.entries[0].score),
        fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::ExecutionOutcome;
    use crate::gateway::ScoreBundle;
    use proptest::prelude::*;

    fn scored(index: usize, coder: f64, coder_len: usize, reviewer: f64, reviewer_len: usize) -> Candidate {
        let mut c = Candidate::new("t", index, format!("    return {index}\n"));
        c.scores = Some(ScoreBundle {
            coder_logp: coder,
            coder_len,
            reviewer_logp: Some(reviewer),
            reviewer_len: Some(reviewer_len),
            prior_logp: None,
            prior_len: None,
        });
        c
    }

    fn with_output(index: usize, output: Option<&str>) -> Candidate {
        let mut c = Candidate::new("t", index, "x");
        c.execution = Some(match output {
            Some(o) => ExecutionOutcome::ok(o, 1),
            None => ExecutionOutcome::failed(ExecStatus::RuntimeError, "ValueError", 1),
        });
        c
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("coder_reviewer".parse::<Method>().unwrap(), Method::CoderReviewer);
        assert!(matches!("bogus".parse::<Method>(), Err(RankError::UnknownMethod(_))));
    }

    #[test]
    fn pointwise_scores() {
        let c = scored(0, -10.0, 10, -5.0, 5);
        let s = |m| score(&RankerSpec::new(m), &c).unwrap();
        assert_eq!(s(Method::Coder), -10.0);
        assert_eq!(s(Method::NCoder), -1.0);
        assert_eq!(s(Method::Reviewer), -5.0);
        assert_eq!(s(Method::NReviewer), -1.0);
        assert_eq!(s(Method::CoderReviewer), -15.0);
        assert_eq!(s(Method::NCoderReviewer), -2.0);
        assert_eq!(s(Method::WeightedMmi), -7.5);
        assert_eq!(
            score(&RankerSpec::new(Method::WeightedMmi).with_alpha(0.2), &c).unwrap(),
            -9.0
        );
    }

    #[test]
    fn alternate_scores_use_prior() {
        let mut c = scored(0, -10.0, 10, -5.0, 5);
        let spec = RankerSpec::new(Method::Alternate).with_alpha(0.5);
        assert!(matches!(
            score(&spec, &c),
            Err(RankError::MissingChannel { channel: "prior", .. })
        ));
        let s = c.scores.as_mut().unwrap();
        s.prior_logp = Some(-20.0);
        s.prior_len = Some(8);
        assert_eq!(score(&spec, &c).unwrap(), 0.0);
        assert_eq!(score(&RankerSpec::new(Method::NAlternate), &c).unwrap(), -1.0 + 1.25);
    }

    #[test]
    fn missing_reviewer_is_error() {
        let mut c = scored(0, -1.0, 1, -1.0, 1);
        c.scores.as_mut().unwrap().reviewer_logp = None;
        assert!(score(&RankerSpec::new(Method::Reviewer), &c).is_err());
        assert!(score(&RankerSpec::new(Method::Coder), &c).is_ok());
    }

    #[test]
    fn ranks_descending() {
        let pool = vec![
            scored(0, -3.0, 1, 0.0, 1),
            scored(1, -1.0, 1, 0.0, 1),
            scored(2, -2.0, 1, 0.0, 1),
        ];
        let r = rank(&RankerSpec::new(Method::Coder), &pool).unwrap();
        assert_eq!(r.order(), vec![1, 2, 0]);
        assert_eq!(r.selected(), 1);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let pool = vec![scored(4, -1.0, 1, 0.0, 1), scored(2, -1.0, 1, 0.0, 1)];
        assert_eq!(
            rank(&RankerSpec::new(Method::Coder), &pool).unwrap().order(),
            vec![2, 4]
        );
    }

    #[test]
    fn rejected_candidates_are_excluded() {
        let mut pool = vec![scored(0, -1.0, 1, 0.0, 1), scored(1, -2.0, 1, 0.0, 1)];
        pool[0].rejection = Some(crate::corpus::Rejection::Trivial);
        assert_eq!(rank(&RankerSpec::new(Method::Coder), &pool).unwrap().order(), vec![1]);
        pool[1].rejection = Some(crate::corpus::Rejection::Empty);
        assert_eq!(rank(&RankerSpec::new(Method::Coder), &pool), Err(RankError::EmptyPool));
    }

    #[test]
    fn random_is_seeded() {
        let pool: Vec<_> = (0..20).map(|i| scored(i, 0.0, 1, 0.0, 1)).collect();
        let spec = RankerSpec::new(Method::Random).with_seed(42);
        let a = rank(&spec, &pool).unwrap();
        assert_eq!(a, rank(&spec, &pool).unwrap());
        let mut order = a.order();
        order.sort_unstable();
        assert_eq!(order, (0..20).collect::<Vec<_>>());
        assert_ne!(a.order(), rank(&spec.with_seed(43), &pool).unwrap().order());
    }

    #[test]
    fn mbr_picks_majority_output() {
        let pool = vec![
            with_output(0, Some("A")),
            with_output(1, Some("A")),
            with_output(2, Some("B")),
        ];
        let r = mbr_exec_select(&pool).unwrap();
        assert_eq!(r.selected(), 0);
        assert_eq!(r.entries[0].score, 2.0);
    }

    #[test]
    fn mbr_all_distinct_takes_first() {
        let pool = vec![
            with_output(0, Some("A")),
            with_output(1, Some("B")),
            with_output(2, Some("C")),
        ];
        assert_eq!(mbr_exec_select(&pool).unwrap().selected(), 0);
    }

    #[test]
    fn mbr_errors_are_singletons() {
        let pool = vec![
            with_output(0, None),
            with_output(1, Some("B")),
            with_output(2, Some("B")),
        ];
        assert_eq!(mbr_exec_select(&pool).unwrap().selected(), 1);
        let errs = vec![with_output(0, None), with_output(1, None)];
        let r = mbr_exec_select(&errs).unwrap();
        assert!(r.entries.iter().all(|e| e.score == 1.0));
    }

    #[test]
    fn mbr_requires_outcomes() {
        let pool = vec![with_output(0, Some("A")), Candidate::new("t", 1, "x")];
        assert_eq!(mbr_exec_select(&pool), Err(RankError::MissingExecution(1)));
    }

    #[test]
    fn numeric_outputs_compare_with_tolerance() {
        assert!(outputs_equivalent("0.5", "0.5000000001"));
        assert!(outputs_equivalent("[1.0, 2.0]", "[1.0000000001, 2.0]"));
        assert!(!outputs_equivalent("0.5", "0.51"));
        assert!(!outputs_equivalent("[1, 2]", "[1, 2, 3]"));
        assert!(!outputs_equivalent("'a1'", "'a2'"));
        assert!(outputs_equivalent("1e-3", "0.001"));
        assert!(!outputs_equivalent("True", "False"));
    }

    #[test]
    fn select_falls_back_when_everything_is_rejected() {
        let mut pool = vec![scored(3, -1.0, 1, 0.0, 1), scored(1, -2.0, 1, 0.0, 1)];
        for c in &mut pool {
            c.rejection = Some(crate::corpus::Rejection::Empty);
        }
        let s = select(&RankerSpec::new(Method::Coder), &pool, false).unwrap();
        assert_eq!(s.index, 1);
        assert!(s.fallbacks.all_rejected);
    }

    #[test]
    fn select_with_exec_filter_skips_erroring_candidates() {
        let mut pool = vec![scored(0, -1.0, 1, 0.0, 1), scored(1, -2.0, 1, 0.0, 1)];
        pool[0].execution = Some(ExecutionOutcome::failed(ExecStatus::RuntimeError, "NameError", 1));
        pool[1].execution = Some(ExecutionOutcome::ok("1", 1));
        let spec = RankerSpec::new(Method::Coder);
        assert_eq!(select(&spec, &pool, false).unwrap().index, 0);
        let s = select(&spec, &pool, true).unwrap();
        assert_eq!(s.index, 1);
        assert!(!s.fallbacks.exec_filter);
    }

    fn arb_pool() -> impl Strategy<Value = Vec<Candidate>> {
        prop::collection::vec((-50.0f64..0.0, 1usize..40, -50.0f64..0.0, 1usize..20), 1..30).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (c, cl, r, rl))| scored(i, c, cl, r, rl))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn shifting_coder_scores_preserves_rankings(pool in arb_pool(), shift in -20.0f64..20.0) {
            let shifted: Vec<Candidate> = pool.iter().cloned().map(|mut c| {
                c.scores.as_mut().unwrap().coder_logp += shift;
                c
            }).collect();
            // Length-normalized methods shift by different amounts per
            // candidate, so only the unnormalized ones are invariant.
            for m in [Method::Coder, Method::CoderReviewer, Method::WeightedMmi, Method::Reviewer] {
                let spec = RankerSpec::new(m);
                let a = rank(&spec, &pool).unwrap().order();
                let b = rank(&spec, &shifted).unwrap().order();
                // Floating-point rounding can only matter for near ties.
                let scores: Vec<f64> = pool.iter().map(|c| score(&spec, c).unwrap()).collect();
                let mut sorted = scores.clone();
                sorted.sort_by(f64::total_cmp);
                let gap = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
                if gap > 1e-9 {
                    prop_assert_eq!(a, b, "method {}", m);
                }
            }
        }

        #[test]
        fn equal_lengths_make_normalized_sum_match_sum(pool in arb_pool()) {
            let equal: Vec<Candidate> = pool.into_iter().map(|mut c| {
                let s = c.scores.as_mut().unwrap();
                s.coder_len = 7;
                s.reviewer_len = Some(7);
                c
            }).collect();
            let a = rank(&RankerSpec::new(Method::NCoderReviewer), &equal).unwrap().selected();
            let b = rank(&RankerSpec::new(Method::CoderReviewer), &equal).unwrap().selected();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn rankings_are_permutations_of_live_candidates(pool in arb_pool(), seed in any::<u64>()) {
            for m in [Method::Random, Method::Coder, Method::NCoderReviewer] {
                let r = rank(&RankerSpec::new(m).with_seed(seed), &pool).unwrap();
                let mut order = r.order();
                order.sort_unstable();
                prop_assert_eq!(order, (0..pool.len()).collect::<Vec<_>>());
            }
        }
    }
}
