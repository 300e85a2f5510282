//! In-process sample → score → execute for one task.

use thiserror::Error;

use crate::corpus::{Pool, TaskInstance};
use crate::evaluation::ProbePool;
use crate::executor::{execute_pool, ExecError, ExecOptions, Executor};
use crate::gateway::Gateway;
use crate::prompt::PromptBuilder;
use crate::scoring::{build_probe_pool, sample_pool, score_pool, SamplingParams, ScoringError, ScoringOptions};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

pub struct Pipeline<'a> {
    pub gateway: &'a Gateway,
    pub executor: &'a dyn Executor,
    pub builder: PromptBuilder,
    pub sampling: SamplingParams,
    pub scoring: ScoringOptions,
    pub exec: ExecOptions,
}

impl Pipeline<'_> {
    /// Samples, scores and executes a full pool for `task`.
    pub fn pool(&self, task: &TaskInstance) -> Result<Pool, PipelineError> {
        let mut candidates = sample_pool(self.gateway, &self.builder, task, &self.sampling)?;
        score_pool(self.gateway, &self.builder, task, &mut candidates, &self.scoring)?;
        execute_pool(self.executor, &mut candidates, task, &self.exec)?;
        Ok(Pool::new(task.task_id.clone(), candidates))
    }

    /// Probe pool built from an already prepared pool.
    pub fn probes(&self, task: &TaskInstance, pool: &Pool) -> Result<ProbePool, PipelineError> {
        Ok(build_probe_pool(
            self.gateway,
            &self.builder,
            task,
            &pool.candidates,
            &self.scoring,
        )?)
    }
}
