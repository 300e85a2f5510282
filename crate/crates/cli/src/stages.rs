//! Pipeline stages over a run directory.
//!
//! ```text
//! run/
//!   manifest.json      backend identity, sampling params, effective config
//!   corpus.jsonl       copy of the tasks the pools were drawn for
//!   cache/             gateway response cache
//!   pools/<task>.jsonl one candidate per line
//!   probes/<task>.json pools with degenerate programs injected
//!   selections.jsonl   one line per task x method
//!   report.json, report.csv
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use coderev::corpus::{load_corpus, load_pool, save_corpus, save_pool, Pool, TaskInstance};
use coderev::evaluation::{evaluate, EvalConfig, EvalReport, ProbePool};
use coderev::executor::{execute_pool, ExecOptions, Executor, MockExecConfig, MockExecutor, ProcessSandbox};
use coderev::gateway::{DiskCache, Gateway, HttpBackend, HttpConfig, MockBackend, MockConfig};
use coderev::prompt::PromptBuilder;
use coderev::rerank::{select, Fallbacks, Method};
use coderev::scoring::{build_probe_pool, sample_pool, score_pool, SamplingParams, ScoringOptions};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SELECTIONS_FILE: &str = "selections.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub backend: String,
    pub sampling: SamplingParams,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub task_id: String,
    pub method: String,
    pub index: usize,
    pub score: Option<f64>,
    pub fallbacks: Fallbacks,
    pub correct: Option<bool>,
}

/// File stem for a task: readable characters kept, plus a short digest so
/// that ids differing only in punctuation never collide.
pub fn task_stem(task_id: &str) -> String {
    let readable: String = task_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let digest = DiskCache::key(&serde_json::json!(task_id));
    format!("{readable}-{}", &digest[..8])
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["cache", "pools", "probes"] {
            fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn pool_path(&self, task_id: &str) -> PathBuf {
        self.root.join("pools").join(format!("{}.jsonl", task_stem(task_id)))
    }

    pub fn probe_path(&self, task_id: &str) -> PathBuf {
        self.root.join("probes").join(format!("{}.json", task_stem(task_id)))
    }

    pub fn manifest(&self) -> Result<Option<Manifest>> {
        read_manifest(&self.root)
    }

    fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let text = serde_json::to_string_pretty(m)?;
        fs::write(self.root.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    fn load_pool(&self, task: &TaskInstance) -> Result<Pool> {
        let path = self.pool_path(&task.task_id);
        if !path.is_file() {
            bail!("no pool for task {}; run `coderev sample` first", task.task_id);
        }
        Ok(Pool::new(task.task_id.clone(), load_pool(&path)?))
    }

    fn load_probe(&self, task: &TaskInstance) -> Result<Option<ProbePool>> {
        let path = self.probe_path(&task.task_id);
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(&path)?)?))
    }
}

pub fn read_manifest(root: &Path) -> Result<Option<Manifest>> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    Ok(Some(
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    ))
}

/// A configured run: tasks, gateway and run directory.
pub struct Session {
    pub config: RunConfig,
    pub dir: RunDir,
    pub tasks: Vec<TaskInstance>,
    gateway: Option<Gateway>,
}

fn build_gateway(config: &RunConfig, cache: &Path) -> Result<Option<Gateway>> {
    let backend: Arc<dyn coderev::gateway::CompletionBackend> = if let Some(path) = &config.mock {
        Arc::new(MockBackend::new(MockConfig::load(path)?))
    } else if let Some(url) = &config.backend {
        let mut http = HttpConfig::new(url.clone());
        http.model = config.model.clone();
        Arc::new(HttpBackend::new(http))
    } else {
        return Ok(None);
    };
    Ok(Some(Gateway::new(backend).with_cache(DiskCache::open(cache)?)))
}

impl Session {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = RunDir::create(&config.run_dir)?;
        let copy = dir.root.join("corpus.jsonl");
        // Later stages stick to the tasks the pools were sampled for.
        let tasks = if copy.is_file() {
            load_corpus(&copy)?
        } else if let Some(path) = &config.corpus {
            load_corpus(path)?
        } else {
            bail!("no corpus: pass --corpus or point --run-dir at an existing run");
        };
        let gateway = build_gateway(&config, &dir.root.join("cache"))?;
        Ok(Self {
            config,
            dir,
            tasks,
            gateway,
        })
    }

    fn gateway(&self) -> Result<&Gateway> {
        self.gateway
            .as_ref()
            .context("no backend configured: pass --mock <fixture> or --backend <url>")
    }

    fn executor(&self) -> Result<Box<dyn Executor>> {
        if let Some(path) = &self.config.mock_exec {
            return Ok(Box::new(MockExecutor::new(MockExecConfig::load(path)?)));
        }
        if let Some(cmd) = &self.config.runner {
            return Ok(Box::new(ProcessSandbox::new(cmd.clone())));
        }
        bail!("no executor configured: pass --mock-exec <fixture> or --runner <command>")
    }

    fn save_manifest(&self, backend: String) -> Result<()> {
        self.dir.write_manifest(&Manifest {
            backend,
            sampling: self.config.sampling,
            config: self.config.clone(),
        })
    }

    fn pools(&self) -> Result<Vec<Pool>> {
        self.tasks.iter().map(|t| self.dir.load_pool(t)).collect()
    }

    /// Samples a pool for every task that does not have one yet.
    pub fn sample(&self) -> Result<()> {
        let gateway = self.gateway()?;
        if let Some(m) = self.dir.manifest()? {
            let has_pools = self.tasks.iter().any(|t| self.dir.pool_path(&t.task_id).is_file());
            if has_pools && (m.backend != gateway.identity() || m.sampling != self.config.sampling) {
                bail!(
                    "{} was sampled with backend {} and {:?}; use a fresh --run-dir",
                    self.dir.root.display(),
                    m.backend,
                    m.sampling
                );
            }
        }
        let copy = self.dir.root.join("corpus.jsonl");
        if !copy.is_file() {
            save_corpus(&self.tasks, &copy)?;
        }
        self.save_manifest(gateway.identity())?;
        let builder = PromptBuilder::default();
        for task in &self.tasks {
            let path = self.dir.pool_path(&task.task_id);
            if path.is_file() {
                info!("{}: already sampled", task.task_id);
                continue;
            }
            let pool = sample_pool(gateway, &builder, task, &self.config.sampling)?;
            save_pool(&pool, &path)?;
            info!("{}: sampled {} candidates", task.task_id, pool.len());
        }
        Ok(())
    }

    fn scoring_options(&self) -> ScoringOptions {
        ScoringOptions {
            reviewer: true,
            prior: self.config.methods.iter().any(|m| m.needs_prior()),
            rejection: self.config.rejection,
        }
    }

    /// Applies rejection, fills in missing scores and builds probe pools.
    pub fn score(&self) -> Result<()> {
        let gateway = self.gateway()?;
        let builder = PromptBuilder::default();
        let options = self.scoring_options();
        for task in &self.tasks {
            let mut pool = self.dir.load_pool(task)?;
            score_pool(gateway, &builder, task, &mut pool.candidates, &options)?;
            save_pool(&pool.candidates, self.dir.pool_path(&task.task_id))?;
            let probe_path = self.dir.probe_path(&task.task_id);
            let stale = match self.dir.load_probe(task)? {
                Some(p) => {
                    options.prior
                        && p.candidates
                            .iter()
                            .any(|c| c.scores.as_ref().is_some_and(|s| s.prior().is_none()))
                }
                None => true,
            };
            if stale {
                let probe = build_probe_pool(gateway, &builder, task, &pool.candidates, &options)?;
                fs::write(&probe_path, serde_json::to_string(&probe)? + "\n")?;
            }
            let rejected = pool.candidates.iter().filter(|c| c.is_rejected()).count();
            info!(
                "{}: scored, {rejected} of {} rejected",
                task.task_id,
                pool.candidates.len()
            );
        }
        self.save_manifest(gateway.identity())
    }

    /// Runs candidates against visible tests and records hidden-test verdicts.
    pub fn execute(&self) -> Result<()> {
        let executor = self.executor()?;
        let options = ExecOptions {
            timeout_ms: self.config.timeout_ms,
            concurrency: self.config.concurrency,
            judge: true,
        };
        for task in &self.tasks {
            let mut pool = self.dir.load_pool(task)?;
            execute_pool(executor.as_ref(), &mut pool.candidates, task, &options)?;
            save_pool(&pool.candidates, self.dir.pool_path(&task.task_id))?;
            let correct = pool.candidates.iter().filter(|c| c.correct == Some(true)).count();
            info!(
                "{}: executed, {correct} of {} correct",
                task.task_id,
                pool.candidates.len()
            );
        }
        Ok(())
    }

    /// Picks one candidate per task and method.
    pub fn rerank(&self) -> Result<Vec<SelectionRecord>> {
        let mut records = Vec::new();
        for pool in self.pools()? {
            for spec in self.config.specs() {
                let s = select(&spec, &pool.candidates, self.config.exec_filter).map_err(|e| {
                    let hint = if spec.method == Method::MbrExec || self.config.exec_filter {
                        " (run `coderev execute` first)"
                    } else {
                        ""
                    };
                    anyhow::anyhow!("task {}: {e}{hint}", pool.task_id)
                })?;
                records.push(SelectionRecord {
                    task_id: pool.task_id.clone(),
                    method: spec.label(),
                    index: s.index,
                    score: s.score,
                    fallbacks: s.fallbacks,
                    correct: pool.get(s.index).and_then(|c| c.correct),
                });
            }
        }
        let mut out = BufWriter::new(fs::File::create(self.dir.root.join(SELECTIONS_FILE))?);
        for r in &records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        info!("wrote {} selections", records.len());
        Ok(records)
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            pool_size: self.config.sampling.n,
            exec_filter: self.config.exec_filter,
            ..self.config.eval.clone()
        }
    }

    /// Bootstrap accuracy, probe MRR, sample-count curve and α sweep.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let pools = self.pools()?;
        let mut probes = Vec::new();
        for task in &self.tasks {
            if let Some(p) = self.dir.load_probe(task)? {
                probes.push(p);
            }
        }
        if !probes.is_empty() && probes.len() != self.tasks.len() {
            log::warn!(
                "probe pools exist for only {} of {} tasks",
                probes.len(),
                self.tasks.len()
            );
        }
        let report = evaluate(&self.config.specs(), &pools, &probes, &self.eval_config())?;
        report.write(&self.dir.root)?;
        for row in &report.bootstrap {
            info!("{:<20} {:.3} ± {:.3}", row.method, row.mean, row.stderr);
        }
        Ok(report)
    }
}
