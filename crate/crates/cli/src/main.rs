mod config;
mod stages;

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use coderev::rerank::Method;
use coderev::synth;

use config::RunConfig;
use stages::{read_manifest, Session};

#[derive(Debug, Parser)]
#[command(
    name = "coderev",
    version,
    about = "Rerank sampled programs with Coder and Reviewer likelihoods"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample candidate pools for every task.
    Sample(RunArgs),
    /// Apply rejection filters and compute likelihood scores.
    Score(RunArgs),
    /// Execute candidates and record correctness verdicts.
    Execute(RunArgs),
    /// Select one candidate per task and method.
    Rerank(RunArgs),
    /// Write the evaluation report.
    Evaluate(RunArgs),
    /// All stages in order.
    Run(RunArgs),
    /// Write a synthetic corpus with mock backend and executor fixtures.
    InitDemo {
        #[arg(long, default_value = "demo")]
        out: PathBuf,
        #[arg(long, default_value_t = synth::MAX_TASKS)]
        tasks: usize,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Completion endpoint URL. The API key is read from CODEREV_API_KEY.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Mock backend fixture (JSON).
    #[arg(long)]
    mock: Option<PathBuf>,
    /// Ranking methods, comma separated or repeated.
    #[arg(long = "method", value_delimiter = ',', value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Rank only candidates that ran their visible test cleanly.
    #[arg(long)]
    exec_filter: bool,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Scripted executor fixture (JSON).
    #[arg(long)]
    mock_exec: Option<PathBuf>,
    /// Sandbox runner command, split on whitespace.
    #[arg(long)]
    runner: Option<String>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| {
        let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("{e}; expected one of {}", known.join(", "))
    })
}

impl RunArgs {
    /// Config precedence: explicit file, else the manifest of an existing
    /// run directory, else defaults. Flags override all of them.
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match (&self.config, &self.run_dir) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, dir) => {
                let dir = dir.clone().unwrap_or_else(|| RunConfig::default().run_dir);
                read_manifest(&dir)?.map(|m| m.config).unwrap_or_default()
            }
        };
        if let Some(v) = self.corpus {
            c.corpus = Some(v);
        }
        if let Some(v) = self.backend {
            c.backend = Some(v);
            c.mock = None;
        }
        if let Some(v) = self.model {
            c.model = Some(v);
        }
        if let Some(v) = self.mock {
            c.mock = Some(v);
        }
        if !self.methods.is_empty() {
            c.methods = self.methods;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if self.exec_filter {
            c.exec_filter = true;
        }
        if let Some(v) = self.n_samples {
            c.sampling.n = v;
            c.eval.pool_size = v;
        }
        if let Some(v) = self.subsample {
            c.eval.subsample_size = v;
        }
        if let Some(v) = self.trials {
            c.eval.bootstrap_trials = v;
        }
        if let Some(v) = self.seed {
            c.sampling.seed = v;
            c.eval.seed = v;
        }
        if let Some(v) = self.run_dir {
            c.run_dir = v;
        }
        if let Some(v) = self.timeout_ms {
            c.timeout_ms = v;
        }
        if let Some(v) = self.mock_exec {
            c.mock_exec = Some(v);
        }
        if let Some(v) = self.runner {
            c.runner = Some(v.split_whitespace().map(String::from).collect());
            c.mock_exec = None;
        }
        Ok(c)
    }
}

fn init_demo(out: &Path, tasks: usize) -> Result<()> {
    let fixture = synth::fixture(tasks.clamp(1, synth::MAX_TASKS), &synth::VariantMix::default());
    fixture.write(out)?;
    let config = RunConfig {
        corpus: Some(synth::CORPUS_FILE.into()),
        mock: Some(synth::BACKEND_FILE.into()),
        mock_exec: Some(synth::EXECUTOR_FILE.into()),
        ..RunConfig::default()
    };
    std::fs::write(out.join("coderev.toml"), config.to_toml()?)?;
    log::info!("wrote demo fixtures to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Sample,
    Score,
    Execute,
    Rerank,
    Evaluate,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    use Stage::*;
    let (args, stages): (RunArgs, &[Stage]) = match cli.command {
        Command::InitDemo { out, tasks } => return init_demo(&out, tasks),
        Command::Sample(a) => (a, &[Sample]),
        Command::Score(a) => (a, &[Score]),
        Command::Execute(a) => (a, &[Execute]),
        Command::Rerank(a) => (a, &[Rerank]),
        Command::Evaluate(a) => (a, &[Evaluate]),
        Command::Run(a) => (a, &[Sample, Score, Execute, Rerank, Evaluate]),
    };
    let session = Session::open(args.resolve()?)?;
    for stage in stages {
        match stage {
            Sample => session.sample()?,
            Score => session.score()?,
            Execute => session.execute()?,
            Rerank => drop(session.rerank()?),
            Evaluate => drop(session.evaluate()?),
        }
    }
    Ok(())
}
