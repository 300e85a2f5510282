use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use coderev::evaluation::EvalConfig;
use coderev::executor::DEFAULT_TIMEOUT_MS;
use coderev::filter::RejectionConfig;
use coderev::rerank::{Method, RankerSpec, DEFAULT_ALPHA};
use coderev::scoring::SamplingParams;

/// Everything a run needs. Loaded from TOML, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    /// Completion endpoint URL.
    pub backend: Option<String>,
    pub model: Option<String>,
    /// Mock backend fixture; takes precedence over `backend`.
    pub mock: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub sampling: SamplingParams,
    pub rejection: RejectionConfig,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub exec_filter: bool,
    pub eval: EvalConfig,
    pub timeout_ms: u64,
    pub concurrency: Option<usize>,
    /// Scripted executor fixture; takes precedence over `runner`.
    pub mock_exec: Option<PathBuf>,
    /// Sandbox runner command line.
    pub runner: Option<Vec<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            backend: None,
            model: None,
            mock: None,
            run_dir: PathBuf::from("run"),
            sampling: SamplingParams::default(),
            rejection: RejectionConfig::default(),
            methods: Method::STANDARD.to_vec(),
            alpha: DEFAULT_ALPHA,
            exec_filter: false,
            eval: EvalConfig::default(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            concurrency: None,
            mock_exec: None,
            runner: None,
        }
    }
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Reads a TOML config. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut config.corpus);
        rebase(base, &mut config.mock);
        rebase(base, &mut config.mock_exec);
        if config.run_dir.is_relative() {
            config.run_dir = base.join(&config.run_dir);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn specs(&self) -> Vec<RankerSpec> {
        self.methods
            .iter()
            .map(|&m| RankerSpec::new(m).with_alpha(self.alpha).with_seed(self.eval.seed))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("no ranking methods selected");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!("alpha must be in (0, 1), got {}", self.alpha);
        }
        if self.sampling.n == 0 {
            bail!("n_samples must be at least 1");
        }
        self.rejection.validate().map_err(anyhow::Error::msg)?;
        self.eval.validate()?;
        for (what, path) in [
            ("corpus", &self.corpus),
            ("mock backend", &self.mock),
            ("mock executor", &self.mock_exec),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    bail!("{what} file {} does not exist", p.display());
                }
            }
        }
        if self.runner.as_ref().is_some_and(Vec::is_empty) {
            bail!("runner command is empty");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.sampling.temperature, 0.4);
        assert_eq!(c.sampling.max_tokens, 300);
        assert_eq!(c.sampling.n, 125);
        assert_eq!(c.eval.subsample_size, 25);
        assert_eq!(c.eval.bootstrap_trials, 50);
        assert_eq!(c.alpha, 0.5);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(
            &path,
            "corpus = \"tasks.jsonl\"\nmethods = [\"coder\", \"n-coder-reviewer\"]\n[eval]\nbootstrap_trials = 7\n",
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.corpus, Some(dir.path().join("tasks.jsonl")));
        assert_eq!(c.methods, vec![Method::Coder, Method::NCoderReviewer]);
        assert_eq!(c.eval.bootstrap_trials, 7);
        assert_eq!(c.eval.subsample_size, 25);
        assert_eq!(c.run_dir, dir.path().join("run"));
    }

    #[test]
    fn unknown_method_in_file_is_rejected() {
        assert!(toml::from_str::<RunConfig>("methods = [\"oracle\"]").is_err());
    }
}
