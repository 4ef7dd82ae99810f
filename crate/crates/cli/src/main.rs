use std::path::PathBuf;
use std::process::ExitCode;

use aec::controller::{CriticBackend, ExplorerBackend};
use aec::gridworld::{Split, TaskKind};
use aec::harness::{self, Command, EncoderBackend, RunArtifacts, RunConfig};
use aec::llm::CacheMode;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aec", version, about = "Episodic control agent for a text gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one memory per seed, evaluating at each checkpoint.
    Train(RunArgs),
    /// Evaluate a stored memory (or an empty one) greedily.
    Eval(RunArgs),
    /// Train on a task starting from a memory built on another task.
    Transfer(RunArgs),
    /// Re-run a stored run from the response cache and compare.
    Replay(ReplayArgs),
}

/// Every flag mirrors a config-file key and overrides it.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML or JSON file with run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Training frame budget per seed.
    #[arg(long)]
    frames: Option<u64>,
    #[arg(long)]
    encoder: Option<EncoderBackend>,
    #[arg(long)]
    critic: Option<CriticBackend>,
    #[arg(long)]
    explorer: Option<ExplorerBackend>,
    #[arg(long)]
    gamma: Option<f64>,
    /// no_change or new_object.
    #[arg(long)]
    split: Option<Split>,
    /// Base URL of an OpenAI-compatible chat completions server.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// online or cache-only.
    #[arg(long)]
    mode: Option<CacheMode>,
    /// Memory file to start from (required for transfer).
    #[arg(long)]
    memory_in: Option<PathBuf>,
    /// Output directory; without it only the summary is printed.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train without committing to memory.
    #[arg(long)]
    no_commit: bool,
    #[arg(long)]
    eval_envs: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Directory written by an earlier train, eval or transfer run.
    run_dir: PathBuf,
    /// Cache to read instead of the one recorded in the run config.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(task, frames, encoder, critic, explorer, gamma, split, model, mode, eval_envs, checkpoint_every);
        if let Some(s) = self.seed {
            c.seeds = s;
        }
        if self.endpoint.is_some() {
            c.endpoint = self.endpoint;
        }
        if self.cache_dir.is_some() {
            c.cache_dir = self.cache_dir;
        }
        if self.memory_in.is_some() {
            c.memory_in = self.memory_in;
        }
        if self.out.is_some() {
            c.out = self.out;
        }
        if self.no_commit {
            c.commit = false;
        }
        Ok(c)
    }
}

fn finish(art: &RunArtifacts) -> Result<ExitCode> {
    if let Some(dir) = &art.config.out {
        harness::emit_outputs(art, dir).with_context(|| format!("writing outputs to {}", dir.display()))?;
        eprintln!("outputs written to {}", dir.display());
    }
    println!("{}", serde_json::to_string_pretty(&harness::summary_json(&art.report))?);
    let r = &art.report;
    println!(
        "success {:.3} (std {}, n={}), exploration rate {:.3}, llm invocation rate {:.3}",
        r.final_success.mean,
        r.final_success.std_text(),
        r.final_success.n,
        r.exploration_rate.mean,
        r.llm_invocation_rate.mean
    );
    if let Some(e) = &r.error {
        eprintln!("run incomplete: {e}");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Train(a) => {
            let c = a.resolve()?;
            finish(&harness::run_training(&c)?)
        }
        Cmd::Eval(a) => {
            let c = a.resolve()?;
            finish(&harness::run_eval(&c)?)
        }
        Cmd::Transfer(a) => {
            let c = a.resolve()?;
            c.validate(Command::Transfer)?;
            let Some(src) = c.memory_in.clone() else {
                bail!("transfer needs --memory-in");
            };
            finish(&harness::run_transfer(&c, &src)?)
        }
        Cmd::Replay(a) => {
            let out = harness::replay(&a.run_dir, a.cache_dir.as_deref())?;
            if out.identical {
                println!("replay identical");
                Ok(ExitCode::SUCCESS)
            } else {
                for d in &out.differences {
                    println!("replay differs: {d}");
                }
                Ok(ExitCode::from(1))
            }
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
