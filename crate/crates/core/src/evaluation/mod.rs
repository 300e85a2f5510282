//! Bootstrap accuracy, degenerate-probe MRR, sample-count curves and the
//! α sweep.

mod bleu;
mod report;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Candidate, Pool};
use crate::filter::DegenerateKind;
use crate::rerank::{rank, select, Method, RankError, RankerSpec};

pub use bleu::char_bleu4;
pub use report::{AlphaRow, CurveRow, EvalReport, MethodRow, MrrRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no pools to evaluate")]
    NoPools,
    #[error("task {task_id}: pool has {size} candidates, need {needed}")]
    PoolTooSmall {
        task_id: String,
        size: usize,
        needed: usize,
    },
    #[error("task {task_id}: candidate {index} has no correctness verdict")]
    MissingVerdict { task_id: String, index: usize },
    #[error("task {task_id}: probe for {kind:?} is missing")]
    MissingProbe { task_id: String, kind: DegenerateKind },
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("task {task_id}: {source}")]
    Rank {
        task_id: String,
        #[source]
        source: RankError,
    },
    #[error("could not write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("could not write report: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pool_size: usize,
    pub subsample_size: usize,
    pub bootstrap_trials: usize,
    pub seed: u64,
    pub alpha_grid: Vec<f64>,
    pub sample_sizes: Vec<usize>,
    pub exec_filter: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pool_size: 125,
            subsample_size: 25,
            bootstrap_trials: 50,
            seed: 0,
            alpha_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            sample_sizes: vec![1, 5, 10, 25, 50, 100, 125],
            exec_filter: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subsample_size == 0 || self.subsample_size > self.pool_size {
            return Err(EvalError::Config(format!(
                "subsample size {} must be in 1..={}",
                self.subsample_size, self.pool_size
            )));
        }
        if self.bootstrap_trials == 0 {
            return Err(EvalError::Config("at least one bootstrap trial is required".into()));
        }
        if let Some(a) = self.alpha_grid.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(EvalError::Config(format!("alpha {a} is outside (0, 1)")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
    /// Tasks that needed a fallback selection in at least one trial.
    pub fallback_tasks: usize,
}

/// Mixes a base seed with two coordinates into an independent stream seed.
fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_pools(pools: &[Pool], subsample: usize) -> Result<()> {
    if pools.is_empty() {
        return Err(EvalError::NoPools);
    }
    for p in pools {
        if p.candidates.len() < subsample {
            return Err(EvalError::PoolTooSmall {
                task_id: p.task_id.clone(),
                size: p.candidates.len(),
                needed: subsample,
            });
        }
        if let Some(c) = p.candidates.iter().find(|c| c.correct.is_none()) {
            return Err(EvalError::MissingVerdict {
                task_id: p.task_id.clone(),
                index: c.index,
            });
        }
    }
    Ok(())
}

/// Mean top-1 accuracy over repeated subsamples drawn without replacement.
///
/// Each trial draws `subsample` candidates per task, runs rejection, the
/// optional executability filter and the ranker, and averages correctness
/// over tasks. The result is the mean over trials with standard error
/// `sd / sqrt(trials)`.
pub fn bootstrap_accuracy(
    spec: &RankerSpec,
    pools: &[Pool],
    subsample: usize,
    config: &EvalConfig,
) -> Result<BootstrapResult> {
    check_pools(pools, subsample)?;
    if config.bootstrap_trials == 0 || subsample == 0 {
        return Err(EvalError::Config("trials and subsample size must be positive".into()));
    }
    let mut order: Vec<&Pool> = pools.iter().collect();
    order.sort_by(|a, b| a.task_id.cmp(&b.task_id));

    let per_trial: Vec<(f64, Vec<bool>)> = (0..config.bootstrap_trials)
        .into_par_iter()
        .map(|trial| {
            let mut correct = 0usize;
            let mut fell_back = Vec::with_capacity(order.len());
            for (t, pool) in order.iter().enumerate() {
                let seed = derive_seed(config.seed, trial as u64, t as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sub: Vec<Candidate> = index::sample(&mut rng, pool.candidates.len(), subsample)
                    .into_iter()
                    .map(|i| pool.candidates[i].clone())
                    .collect();
                let trial_spec = spec.with_seed(derive_seed(spec.seed, trial as u64, t as u64));
                let s = select(&trial_spec, &sub, config.exec_filter).map_err(|source| EvalError::Rank {
                    task_id: pool.task_id.clone(),
                    source,
                })?;
                let chosen = sub
                    .iter()
                    .find(|c| c.index == s.index)
                    .expect("selection comes from the subsample");
                correct += usize::from(chosen.correct == Some(true));
                fell_back.push(s.fallbacks.all_rejected || s.fallbacks.exec_filter);
            }
            Ok((correct as f64 / order.len() as f64, fell_back))
        })
        .collect::<Result<_>>()?;

    let accs: Vec<f64> = per_trial.iter().map(|(a, _)| *a).collect();
    let (mean, stderr) = mean_and_stderr(&accs);
    let fallback_tasks = (0..order.len())
        .filter(|&t| per_trial.iter().any(|(_, f)| f[t]))
        .count();
    Ok(BootstrapResult {
        mean,
        stderr,
        trials: config.bootstrap_trials,
        fallback_tasks,
    })
}

/// A pool with degenerate probe programs injected at known indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePool {
    pub task_id: String,
    pub candidates: Vec<Candidate>,
    pub probes: BTreeMap<DegenerateKind, usize>,
}

/// Mean reciprocal rank of each probe kind. Rejection flags are ignored:
/// the point is to see how the bare ranker treats degenerate programs.
pub fn degenerate_mrr(spec: &RankerSpec, pools: &[ProbePool]) -> Result<BTreeMap<DegenerateKind, f64>> {
    if pools.is_empty() {
        return Err(EvalError::NoPools);
    }
    let mut sums: BTreeMap<DegenerateKind, f64> = DegenerateKind::ALL.iter().map(|k| (*k, 0.0)).collect();
    for pool in pools {
        let unfiltered: Vec<Candidate> = pool
            .candidates
            .iter()
            .cloned()
            .map(|mut c| {
                c.rejection = None;
                c
            })
            .collect();
        let ranking = rank(spec, &unfiltered).map_err(|source| EvalError::Rank {
            task_id: pool.task_id.clone(),
            source,
        })?;
        for kind in DegenerateKind::ALL {
            let missing = || EvalError::MissingProbe {
                task_id: pool.task_id.clone(),
                kind,
            };
            let index = *pool.probes.get(&kind).ok_or_else(missing)?;
            let r = ranking.rank_of(index).ok_or_else(missing)?;
            *sums.get_mut(&kind).expect("all kinds present") += 1.0 / r as f64;
        }
    }
    Ok(sums.into_iter().map(|(k, s)| (k, s / pools.len() as f64)).collect())
}

/// Bootstrap accuracy at each subsample size.
pub fn accuracy_vs_samples(
    spec: &RankerSpec,
    pools: &[Pool],
    sizes: &[usize],
    config: &EvalConfig,
) -> Result<Vec<(usize, BootstrapResult)>> {
    sizes
        .iter()
        .map(|&n| Ok((n, bootstrap_accuracy(spec, pools, n, config)?)))
        .collect()
}

/// Bootstrap accuracy of the α-weighted objectives across `config.alpha_grid`.
/// The alternate objective is included only when every candidate carries a
/// prior score.
pub fn alpha_sweep(pools: &[Pool], config: &EvalConfig) -> Result<Vec<AlphaRow>> {
    let has_prior = pools
        .iter()
        .flat_map(|p| &p.candidates)
        .filter(|c| !c.is_rejected())
        .all(|c| c.scores.as_ref().is_some_and(|s| s.prior().is_some()));
    config
        .alpha_grid
        .iter()
        .map(|&alpha| {
            let run = |m| {
                bootstrap_accuracy(
                    &RankerSpec::new(m).with_alpha(alpha).with_seed(config.seed),
                    pools,
                    config.subsample_size,
                    config,
                )
            };
            Ok(AlphaRow {
                alpha,
                weighted_mmi: run(Method::WeightedMmi)?,
                alternate: if has_prior { Some(run(Method::Alternate)?) } else { None },
            })
        })
        .collect()
}

/// Runs every analysis and assembles the report. MRR is reported for the
/// methods that rank by a per-candidate score; sample sizes larger than the
/// smallest pool are skipped.
pub fn evaluate(specs: &[RankerSpec], pools: &[Pool], probes: &[ProbePool], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    check_pools(pools, config.subsample_size)?;
    let smallest = pools.iter().map(|p| p.candidates.len()).min().unwrap_or(0);
    let sizes: Vec<usize> = config
        .sample_sizes
        .iter()
        .copied()
        .filter(|&n| n >= 1 && n <= smallest)
        .collect();

    let mut bootstrap = Vec::new();
    let mut curve = Vec::new();
    let mut mrr = Vec::new();
    for spec in specs {
        let r = bootstrap_accuracy(spec, pools, config.subsample_size, config)?;
        bootstrap.push(MethodRow::new(spec, &r));
        for (size, r) in accuracy_vs_samples(spec, pools, &sizes, config)? {
            curve.push(CurveRow {
                method: spec.label(),
                size,
                mean: r.mean,
                stderr: r.stderr,
            });
        }
        if !probes.is_empty() && spec.method != Method::MbrExec {
            let m = degenerate_mrr(spec, probes)?;
            mrr.push(MrrRow {
                method: spec.label(),
                return_only: m[&DegenerateKind::ReturnOnly],
                repetitive: m[&DegenerateKind::Repetitive],
                copy_prompt: m[&DegenerateKind::CopyPrompt],
            });
        }
    }
    Ok(EvalReport {
        config: config.clone(),
        tasks: pools.len(),
        bootstrap,
        mrr,
        sample_curve: curve,
        alpha_sweep: alpha_sweep(pools, config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScoreBundle;

    fn cand(task: &str, index: usize, coder: f64, correct: bool) -> Candidate {
        let mut c = Candidate::new(task, index, format!("    return {index}\n"));
        c.scores = Some(ScoreBundle {
            coder_logp: coder,
            coder_len: 3,
            reviewer_logp: Some(coder),
            reviewer_len: Some(3),
            prior_logp: None,
            prior_len: None,
        });
        c.correct = Some(correct);
        c
    }

    fn config(trials: usize) -> EvalConfig {
        EvalConfig {
            pool_size: 4,
            subsample_size: 2,
            bootstrap_trials: trials,
            seed: 7,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn all_correct_pool_is_perfect() {
        let pools = vec![Pool::new(
            "a",
            (0..4).map(|i| cand("a", i, -(i as f64), true)).collect(),
        )];
        let r = bootstrap_accuracy(&RankerSpec::new(Method::Coder), &pools, 2, &config(20)).unwrap();
        assert_eq!((r.mean, r.stderr), (1.0, 0.0));
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let pools = vec![Pool::new(
            "a",
            vec![
                cand("a", 0, -1.0, true),
                cand("a", 1, -3.0, false),
                cand("a", 2, -2.0, false),
                cand("a", 3, -4.0, false),
            ],
        )];
        let spec = RankerSpec::new(Method::Random);
        let a = bootstrap_accuracy(&spec, &pools, 2, &config(200)).unwrap();
        assert_eq!(a, bootstrap_accuracy(&spec, &pools, 2, &config(200)).unwrap());
        let b = bootstrap_accuracy(&RankerSpec::new(Method::Coder), &pools, 2, &config(2000)).unwrap();
        assert!((b.mean - 0.5).abs() < 0.05, "{b:?}");
    }

    #[test]
    fn missing_verdict_and_small_pool_are_errors() {
        let mut pools = vec![Pool::new("a", vec![cand("a", 0, -1.0, true), cand("a", 1, -1.0, true)])];
        assert!(matches!(
            bootstrap_accuracy(&RankerSpec::new(Method::Coder), &pools, 3, &config(1)),
            Err(EvalError::PoolTooSmall { .. })
        ));
        pools[0].candidates[1].correct = None;
        assert!(matches!(
            bootstrap_accuracy(&RankerSpec::new(Method::Coder), &pools, 2, &config(1)),
            Err(EvalError::MissingVerdict { index: 1, .. })
        ));
    }

    #[test]
    fn stderr_uses_sample_deviation() {
        let (m, se) = mean_and_stderr(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((se - (1.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
    }

    fn probe_pool(task: &str, scores: &[f64], probes: [usize; 3]) -> ProbePool {
        ProbePool {
            task_id: task.into(),
            candidates: scores
                .iter()
                .enumerate()
                .map(|(i, s)| cand(task, i, *s, false))
                .collect(),
            probes: DegenerateKind::ALL.into_iter().zip(probes).collect(),
        }
    }

    #[test]
    fn mrr_averages_reciprocal_ranks() {
        let pools = vec![
            probe_pool("a", &[-1.0, -2.0, -3.0, -4.0, -5.0], [3, 0, 4]),
            probe_pool("b", &[-1.0, -2.0, -3.0, -4.0, -5.0], [1, 0, 4]),
        ];
        let m = degenerate_mrr(&RankerSpec::new(Method::Coder), &pools).unwrap();
        assert!((m[&DegenerateKind::ReturnOnly] - 0.375).abs() < 1e-12);
        assert_eq!(m[&DegenerateKind::Repetitive], 1.0);
    }

    #[test]
    fn mrr_ignores_rejection() {
        let mut pools = vec![probe_pool("a", &[-1.0, -2.0, -3.0], [0, 1, 2])];
        pools[0].candidates[0].rejection = Some(crate::corpus::Rejection::Trivial);
        let m = degenerate_mrr(&RankerSpec::new(Method::Coder), &pools).unwrap();
        assert_eq!(m[&DegenerateKind::ReturnOnly], 1.0);
    }

    #[test]
    fn missing_probe_is_error() {
        let mut pools = vec![probe_pool("a", &[-1.0, -2.0], [0, 1, 1])];
        pools[0].probes.remove(&DegenerateKind::CopyPrompt);
        assert!(matches!(
            degenerate_mrr(&RankerSpec::new(Method::Coder), &pools),
            Err(EvalError::MissingProbe {
                kind: DegenerateKind::CopyPrompt,
                ..
            })
        ));
    }

    #[test]
    fn curve_has_one_row_per_size() {
        let pools = vec![Pool::new(
            "a",
            (0..6).map(|i| cand("a", i, -(i as f64), i % 2 == 0)).collect(),
        )];
        let rows = accuracy_vs_samples(&RankerSpec::new(Method::Coder), &pools, &[1, 3, 6], &config(10)).unwrap();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 3, 6]);
        assert_eq!(rows[2].1.mean, 1.0);
    }

    #[test]
    fn sweep_covers_the_grid() {
        let pools = vec![Pool::new(
            "a",
            (0..4).map(|i| cand("a", i, -(i as f64), i == 0)).collect(),
        )];
        let rows = alpha_sweep(&pools, &config(5)).unwrap();
        assert_eq!(rows.len(), 9);
        assert!(rows.iter().all(|r| r.alternate.is_none()));
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        let bad = EvalConfig {
            subsample_size: 200,
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvalConfig {
            alpha_grid: vec![1.0],
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
