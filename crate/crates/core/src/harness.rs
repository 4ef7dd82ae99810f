//! Training, evaluation and transfer runs, and the files they produce.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    Controller, ControllerStats, CriticBackend, DecisionSource, DecisionTrace, ExploreContext, ExplorerBackend,
    LlmCritic, LlmExplorer, OracleCritic, ScriptedExplorer,
};
use crate::encoder::{EncodeContext, EncodeError, LlmEncoder, OracleEncoder, StateEncoder};
use crate::gridworld::{Action, EntityKind, EnvError, Environment, Item, Split, TaskKind, TaskSpec};
use crate::llm::{CacheMode, ClientStats, LlmClient, LlmConfig, LlmError, Transport};
use crate::memory::{CommitStats, EpisodeBuffer, EpisodicMemory, MemoryError, MemoryMetadata, ValueStore};
use crate::scalar::Scalar;
use crate::world_graph::{GraphError, GraphStep, GraphUpdater, LlmGraphUpdater, OracleGraphUpdater, WorldGraph};

pub const DEFAULT_CHECKPOINT_EVERY: u64 = 5_000;
pub const DEFAULT_EVAL_ENVS: usize = 100;
pub const DEFAULT_GAMMA: f64 = 0.99;
/// Set on every evaluation layout seed and cleared on every training seed.
pub const EVAL_SEED_BIT: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("encoder failed: {0}")]
    Encode(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderBackend {
    #[default]
    Oracle,
    Llm,
}

impl fmt::Display for EncoderBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Oracle => "oracle",
            Self::Llm => "llm",
        })
    }
}

impl FromStr for EncoderBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(Self::Oracle),
            "llm" => Ok(Self::Llm),
            _ => Err(format!("unknown encoder backend `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Eval,
    Transfer,
}

/// Every knob of a run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seeds: Vec<u64>,
    pub frames: u64,
    pub encoder: EncoderBackend,
    pub critic: CriticBackend,
    pub explorer: ExplorerBackend,
    pub gamma: f64,
    pub split: Split,
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding the API key; the key itself is never stored.
    pub api_key_env: String,
    pub cache_dir: Option<PathBuf>,
    pub mode: CacheMode,
    pub max_in_flight: usize,
    pub memory_in: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub eval_envs: usize,
    /// Training only: chance of exploring at a critical step instead of
    /// reading memory.
    pub exploit_epsilon: f64,
    /// Training only: chance of a random move from the scripted explorer.
    pub explorer_epsilon: f64,
    /// Disable to run the memory ablation.
    pub commit: bool,
    /// Wall-clock and latency fields; off keeps reports byte-reproducible.
    pub record_timing: bool,
    pub write_traces: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let llm = LlmConfig::default();
        Self {
            task: TaskKind::GoToLocal,
            seeds: vec![0, 1, 2],
            frames: 25_000,
            encoder: EncoderBackend::Oracle,
            critic: CriticBackend::Oracle,
            explorer: ExplorerBackend::Scripted,
            gamma: DEFAULT_GAMMA,
            split: Split::NoChange,
            endpoint: None,
            model: llm.model,
            api_key_env: "OPENAI_API_KEY".into(),
            cache_dir: None,
            mode: CacheMode::Online,
            max_in_flight: llm.max_in_flight,
            memory_in: None,
            out: None,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            eval_envs: DEFAULT_EVAL_ENVS,
            exploit_epsilon: 0.4,
            explorer_epsilon: 0.1,
            commit: true,
            record_timing: false,
            write_traces: true,
        }
    }
}

impl RunConfig {
    /// Reads a `.toml` or `.json` config file.
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "json" => serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display()))),
            "toml" => toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display()))),
            _ => Err(HarnessError::Config(format!(
                "{}: config files must end in .toml or .json",
                path.display()
            ))),
        }
    }

    pub fn uses_llm(&self) -> bool {
        self.encoder == EncoderBackend::Llm || self.critic == CriticBackend::Llm || self.explorer == ExplorerBackend::Llm
    }

    pub fn validate(&self, command: Command) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if command == Command::Train && self.frames == 0 {
            return bad("frame budget must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.eval_envs == 0 {
            return bad("eval_envs must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        for (name, p) in [("exploit_epsilon", self.exploit_epsilon), ("explorer_epsilon", self.explorer_epsilon)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(HarnessError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if command == Command::Transfer && self.memory_in.is_none() {
            return bad("transfer needs a source memory (memory_in)");
        }
        if self.uses_llm() {
            match self.mode {
                CacheMode::Online if self.endpoint.is_none() => return bad("LLM backends in online mode need an endpoint"),
                CacheMode::CacheOnly if self.cache_dir.is_none() => return bad("cache-only mode needs a cache directory"),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn llm_config(&self) -> LlmConfig {
        LlmConfig {
            endpoint: self.endpoint.clone(),
            api_key: std::env::var(&self.api_key_env).ok(),
            model: self.model.clone(),
            cache_dir: self.cache_dir.clone(),
            mode: self.mode,
            max_in_flight: self.max_in_flight,
            ..LlmConfig::default()
        }
    }

    /// Client for the LLM backends, or `None` when everything is oracle.
    pub fn make_client(&self) -> Result<Option<Arc<LlmClient>>, HarnessError> {
        if !self.uses_llm() {
            return Ok(None);
        }
        Ok(Some(Arc::new(LlmClient::new(self.llm_config())?)))
    }

    pub fn make_client_with(&self, transport: Box<dyn Transport>) -> Result<Option<Arc<LlmClient>>, HarnessError> {
        if !self.uses_llm() {
            return Ok(None);
        }
        Ok(Some(Arc::new(LlmClient::with_transport(self.llm_config(), transport)?)))
    }
}

/// Encoder, controller and graph updater for one worker.
pub struct Backends {
    pub encoder: Box<dyn StateEncoder>,
    pub controller: Controller,
    pub graph: Box<dyn GraphUpdater>,
}

impl Backends {
    pub fn build(config: &RunConfig, client: Option<&Arc<LlmClient>>, training: bool) -> Result<Self, HarnessError> {
        let need = |what: &str| {
            client
                .cloned()
                .ok_or_else(|| HarnessError::Config(format!("{what} backend `llm` needs a client")))
        };
        let encoder: Box<dyn StateEncoder> = match config.encoder {
            EncoderBackend::Oracle => Box::new(OracleEncoder),
            EncoderBackend::Llm => Box::new(LlmEncoder::new(need("encoder")?)),
        };
        let critic: Box<dyn crate::controller::CriticalityJudge> = match config.critic {
            CriticBackend::Oracle => Box::new(OracleCritic),
            CriticBackend::Llm => Box::new(LlmCritic::new(need("critic")?)),
        };
        let explorer_eps = if training { config.explorer_epsilon } else { 0.0 };
        let (explorer, graph): (Box<dyn crate::controller::Explorer>, Box<dyn GraphUpdater>) = match config.explorer {
            ExplorerBackend::Scripted => (
                Box::new(ScriptedExplorer::new(explorer_eps)),
                Box::new(OracleGraphUpdater::default()),
            ),
            ExplorerBackend::Llm => {
                let c = need("explorer")?;
                (Box::new(LlmExplorer::new(c.clone())), Box::new(LlmGraphUpdater::new(c)))
            }
        };
        let mut controller = Controller::new(critic, explorer);
        controller.exploit_epsilon = if training { config.exploit_epsilon } else { 0.0 };
        controller.record_timing = config.record_timing;
        Ok(Self {
            encoder,
            controller,
            graph,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub env_seed: u64,
    pub success: bool,
    pub steps: u32,
    pub reward: f64,
    pub truncated: bool,
    pub traces: Vec<DecisionTrace>,
    pub encode_failures: u64,
    pub graph_violations: u64,
    pub graph_parse_errors: u64,
    /// UnlockLocal successes: the step the matching key was picked up and
    /// the step of the toggle that opened the door.
    pub key_pickup_step: Option<u32>,
    pub unlock_step: Option<u32>,
}

/// Runs one episode from a freshly reset environment.
///
/// With a buffer, every successfully encoded step is recorded; sealing and
/// committing are left to the caller. `step_limit` truncates the episode
/// early to honor an exact frame budget.
pub fn run_episode<S: Scalar>(
    env: &mut Environment,
    backends: &mut Backends,
    memory: &dyn ValueStore<S>,
    mut buffer: Option<&mut EpisodeBuffer<S>>,
    step_limit: u32,
) -> Result<EpisodeOutcome, HarnessError> {
    let spec = env.spec().clone();
    let mut obs = env.reset();
    backends.controller.reset(env.seed());
    let mut graph = WorldGraph::init();
    backends.graph.reset(&mut graph, env.ground_truth());
    let unlock_key = Item::new(env.target().color, EntityKind::Key);

    let mut out = EpisodeOutcome {
        env_seed: env.seed(),
        success: false,
        steps: 0,
        reward: 0.0,
        truncated: false,
        traces: Vec::new(),
        encode_failures: 0,
        graph_violations: 0,
        graph_parse_errors: 0,
        key_pickup_step: None,
        unlock_step: None,
    };
    let mut step = 0u32;
    loop {
        if step >= step_limit {
            out.truncated = true;
            break;
        }
        let before = env.ground_truth().clone();
        let key = match backends.encoder.encode(&EncodeContext {
            observation: &obs,
            spec: &spec,
            full_state: &before,
        }) {
            Ok(k) => Some(k),
            Err(EncodeError::Unparseable { .. }) => {
                out.encode_failures += 1;
                None
            }
            Err(e) => return Err(HarnessError::Encode(e.to_string())),
        };
        let ctx = ExploreContext {
            observation: &obs,
            state: &before,
            spec: &spec,
            graph: &graph,
        };
        let (action, trace) = backends.controller.decide(step, key.as_ref(), memory, &ctx);
        let result = env.step(action)?;
        if let (Some(b), Some(k)) = (buffer.as_deref_mut(), key.as_ref()) {
            b.record(k.canonical(), action, S::from_reward(result.reward))?;
        }
        let after = env.ground_truth();
        if spec.task == TaskKind::UnlockLocal {
            if action == Action::PickUp && after.carrying == Some(unlock_key) && before.carrying.is_none() {
                out.key_pickup_step.get_or_insert(step);
            }
            if action == Action::Toggle && result.success {
                out.unlock_step = Some(step);
            }
        }
        let gstep = GraphStep {
            prev_obs: &obs,
            action,
            new_obs: &result.observation,
            before: &before,
            after,
        };
        match backends.graph.update(&graph, &gstep) {
            Ok(up) => {
                out.graph_violations += up.violations.len() as u64;
                graph = up.graph;
            }
            Err(GraphError::Parse(e)) => {
                out.graph_parse_errors += 1;
                tracing::debug!(error = %e, "graph reply rejected; keeping prior graph");
            }
            Err(GraphError::Backend(e)) => {
                out.graph_parse_errors += 1;
                tracing::warn!(error = %e, "graph backend failed; keeping prior graph");
            }
        }
        out.traces.push(trace);
        obs = result.observation;
        step += 1;
        if result.done {
            out.success = result.success;
            out.reward = result.reward;
            break;
        }
    }
    out.steps = step;
    Ok(out)
}

/// Layout seed of the i-th evaluation environment.
pub fn eval_seed(i: usize) -> u64 {
    EVAL_SEED_BIT | i as u64
}

/// Layout seeds for training episodes of one run seed.
pub struct TrainSeeds(ChaCha8Rng);

impl TrainSeeds {
    pub fn new(run_seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(run_seed))
    }
}

impl Iterator for TrainSeeds {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        Some(self.0.next_u64() & !EVAL_SEED_BIT)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OrderStats {
    pub successes: u64,
    pub key_first: u64,
}

impl OrderStats {
    fn add(&mut self, ep: &EpisodeOutcome) {
        if ep.success {
            self.successes += 1;
            if let (Some(k), Some(u)) = (ep.key_pickup_step, ep.unlock_step) {
                if k < u {
                    self.key_first += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub split: Split,
    pub n_envs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub decision_steps: u64,
    /// Steps decided by an exploration policy, scripted or model-backed.
    pub exploration_steps: u64,
    pub llm_policy_steps: u64,
    pub exploration_rate: f64,
    pub llm_invocation_rate: f64,
    pub unlock_order: Option<OrderStats>,
    pub controller: ControllerStats,
    pub encode_failures: u64,
    pub graph_violations: u64,
    pub graph_parse_errors: u64,
}

pub struct EvalRun {
    pub report: EvalReport,
    pub episodes: Vec<EpisodeOutcome>,
}

/// Fraction of decisions made by an exploration policy, and by the model.
pub fn invocation_rates(traces: &[DecisionTrace]) -> (u64, u64, u64) {
    let total = traces.len() as u64;
    let explore = traces.iter().filter(|t| t.source != DecisionSource::Episodic).count() as u64;
    let llm = traces.iter().filter(|t| t.source == DecisionSource::LlmPolicy).count() as u64;
    (total, explore, llm)
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Greedy evaluation on `n_envs` held-apart layouts. Never writes memory.
pub fn evaluate<S: Scalar>(
    memory: &dyn ValueStore<S>,
    config: &RunConfig,
    task: TaskKind,
    split: Split,
    n_envs: usize,
    client: Option<&Arc<LlmClient>>,
) -> Result<EvalRun, HarnessError> {
    if n_envs == 0 {
        return Err(HarnessError::Config("n_envs must be at least 1".into()));
    }
    let mut eval_cfg = config.clone();
    eval_cfg.task = task;
    let mut backends = Backends::build(&eval_cfg, client, false)?;
    let spec = TaskSpec::new(task).with_split(split);
    let mut episodes = Vec::with_capacity(n_envs);
    let mut order = OrderStats::default();
    for i in 0..n_envs {
        let mut env = Environment::new(spec.clone(), eval_seed(i))?;
        let ep = run_episode(&mut env, &mut backends, memory, None, u32::MAX)?;
        order.add(&ep);
        episodes.push(ep);
    }
    let traces: Vec<DecisionTrace> = episodes.iter().flat_map(|e| e.traces.iter().cloned()).collect();
    let (total, explore, llm) = invocation_rates(&traces);
    let successes = episodes.iter().filter(|e| e.success).count();
    let report = EvalReport {
        task,
        split,
        n_envs,
        successes,
        success_rate: successes as f64 / n_envs as f64,
        decision_steps: total,
        exploration_steps: explore,
        llm_policy_steps: llm,
        exploration_rate: ratio(explore, total),
        llm_invocation_rate: ratio(llm, total),
        unlock_order: (task == TaskKind::UnlockLocal).then_some(order),
        controller: backends.controller.take_stats(),
        encode_failures: episodes.iter().map(|e| e.encode_failures).sum(),
        graph_violations: episodes.iter().map(|e| e.graph_violations).sum(),
        graph_parse_errors: episodes.iter().map(|e| e.graph_parse_errors).sum(),
    };
    Ok(EvalRun { report, episodes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub frame: u64,
    pub success_rate: f64,
    pub exploration_rate: f64,
    pub llm_invocation_rate: f64,
    pub memory_keys: usize,
    pub memory_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub frames: u64,
    pub episodes: u64,
    pub train_successes: u64,
    pub checkpoints: Vec<CheckpointReport>,
    pub final_eval: Option<EvalReport>,
    pub memory_keys: usize,
    pub memory_pairs: usize,
    pub commits: CommitStats,
    pub controller: ControllerStats,
    pub encode_failures: u64,
    pub graph_violations: u64,
    pub graph_parse_errors: u64,
    pub train_unlock_order: Option<OrderStats>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = if n == 0 { 0.0 } else { xs.iter().sum::<f64>() / n as f64 };
        let std = (n >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self { mean, std, n }
    }

    pub fn std_text(&self) -> String {
        self.std.map_or("n/a".to_string(), |s| s.to_string())
    }
}

/// Environment facts that vary between otherwise identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub wall_clock_s: Option<f64>,
    pub llm: Option<ClientStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: Command,
    pub task: TaskKind,
    pub split: Split,
    /// Task(s) of an imported memory.
    pub memory_source: Option<String>,
    pub checkpoint_frames: Vec<u64>,
    pub seeds: Vec<SeedReport>,
    pub final_success: MeanStd,
    pub exploration_rate: MeanStd,
    pub llm_invocation_rate: MeanStd,
    pub eval_seed_bit: u64,
    pub seeds_disjoint: bool,
    pub complete: bool,
    pub error: Option<String>,
    pub runtime: RuntimeInfo,
}

impl RunReport {
    /// The report without fields that legitimately differ between runs.
    pub fn comparable(&self) -> RunReport {
        let mut r = self.clone();
        r.runtime = RuntimeInfo::default();
        r
    }
}

pub struct SeedRun {
    pub report: SeedReport,
    pub memory: EpisodicMemory<f64>,
    pub episodes: Vec<EpisodeOutcome>,
    pub final_eval: Option<Vec<EpisodeOutcome>>,
    pub train_env_seeds: Vec<u64>,
}

/// Everything a run produced; `emit_outputs` writes it to disk.
pub struct RunArtifacts {
    pub config: RunConfig,
    pub command: Command,
    pub report: RunReport,
    pub seeds: Vec<SeedRun>,
}

fn new_memory(config: &RunConfig) -> EpisodicMemory<f64> {
    let mut meta = MemoryMetadata::new(config.task.name(), config.gamma);
    if config.record_timing {
        meta.created_unix = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    }
    EpisodicMemory::new(meta)
}

fn load_foreign(config: &RunConfig) -> Result<Option<EpisodicMemory<f64>>, HarnessError> {
    config
        .memory_in
        .as_ref()
        .map(|p| EpisodicMemory::<f64>::load(p).map_err(HarnessError::from))
        .transpose()
}

fn source_tag(m: &EpisodicMemory<f64>) -> String {
    let meta = m.metadata();
    let mut tags = vec![meta.task.clone()];
    tags.extend(meta.imported_from.iter().cloned());
    tags.dedup();
    tags.join("+")
}

fn checkpoint_frames(config: &RunConfig) -> Vec<u64> {
    let mut frames: Vec<u64> = std::iter::once(0)
        .chain((1..).map(|k| k * config.checkpoint_every).take_while(|&f| f < config.frames))
        .collect();
    if config.frames > 0 {
        frames.push(config.frames);
    }
    frames
}

fn checkpoint(
    frame: u64,
    memory: &EpisodicMemory<f64>,
    config: &RunConfig,
    client: Option<&Arc<LlmClient>>,
) -> Result<(CheckpointReport, EvalRun), HarnessError> {
    let run = evaluate(memory, config, config.task, config.split, config.eval_envs, client)?;
    Ok((
        CheckpointReport {
            frame,
            success_rate: run.report.success_rate,
            exploration_rate: run.report.exploration_rate,
            llm_invocation_rate: run.report.llm_invocation_rate,
            memory_keys: memory.len(),
            memory_pairs: memory.pair_count(),
        },
        run,
    ))
}

fn train_seed(
    config: &RunConfig,
    seed: u64,
    client: Option<&Arc<LlmClient>>,
    foreign: Option<&EpisodicMemory<f64>>,
) -> SeedRun {
    let mut memory = new_memory(config);
    let mut run = SeedRun {
        report: SeedReport {
            seed,
            frames: 0,
            episodes: 0,
            train_successes: 0,
            checkpoints: Vec::new(),
            final_eval: None,
            memory_keys: 0,
            memory_pairs: 0,
            commits: CommitStats::default(),
            controller: ControllerStats::default(),
            encode_failures: 0,
            graph_violations: 0,
            graph_parse_errors: 0,
            train_unlock_order: (config.task == TaskKind::UnlockLocal).then(OrderStats::default),
            error: None,
        },
        memory: new_memory(config),
        episodes: Vec::new(),
        final_eval: None,
        train_env_seeds: Vec::new(),
    };
    let result = (|| -> Result<(), HarnessError> {
        if let Some(f) = foreign {
            memory.import_foreign(f)?;
        }
        let mut backends = Backends::build(config, client, true)?;
        let spec = TaskSpec::new(config.task);
        let checkpoints = checkpoint_frames(config);
        let mut next_cp = 0;
        let mut seeds = TrainSeeds::new(seed);
        let mut frames = 0u64;
        loop {
            while next_cp < checkpoints.len() && frames >= checkpoints[next_cp] {
                let last = next_cp + 1 == checkpoints.len();
                let (cp, eval) = checkpoint(checkpoints[next_cp], &memory, config, client)?;
                run.report.checkpoints.push(cp);
                if last {
                    run.report.final_eval = Some(eval.report);
                    run.final_eval = Some(eval.episodes);
                }
                next_cp += 1;
            }
            if frames >= config.frames {
                break;
            }
            let env_seed = seeds.next().expect("infinite");
            run.train_env_seeds.push(env_seed);
            let mut env = Environment::new(spec.clone(), env_seed)?;
            let mut buffer = EpisodeBuffer::new();
            let limit = u32::try_from(config.frames - frames).unwrap_or(u32::MAX);
            let ep = run_episode(&mut env, &mut backends, &memory, Some(&mut buffer), limit)?;
            buffer.seal();
            if config.commit {
                let s = memory.commit(&buffer, config.gamma)?;
                let c = &mut run.report.commits;
                c.inserts += s.inserts;
                c.raises += s.raises;
                c.noops += s.noops;
                c.evictions += s.evictions;
            }
            frames += u64::from(ep.steps);
            let r = &mut run.report;
            r.frames = frames;
            r.episodes += 1;
            r.train_successes += u64::from(ep.success);
            r.encode_failures += ep.encode_failures;
            r.graph_violations += ep.graph_violations;
            r.graph_parse_errors += ep.graph_parse_errors;
            if let Some(o) = r.train_unlock_order.as_mut() {
                o.add(&ep);
            }
            run.episodes.push(ep);
        }
        let stats = backends.controller.take_stats();
        run.report.controller.add(&stats);
        Ok(())
    })();
    if let Err(e) = result {
        tracing::error!(seed, error = %e, "seed aborted");
        run.report.error = Some(e.to_string());
    }
    run.report.memory_keys = memory.len();
    run.report.memory_pairs = memory.pair_count();
    run.memory = memory;
    run
}

fn assemble(config: &RunConfig, command: Command, seeds: Vec<SeedRun>, source: Option<String>, started: Option<Instant>, client: Option<&Arc<LlmClient>>) -> RunArtifacts {
    let finals: Vec<&EvalReport> = seeds.iter().filter_map(|s| s.report.final_eval.as_ref()).collect();
    let pick = |f: fn(&EvalReport) -> f64| MeanStd::of(&finals.iter().map(|r| f(r)).collect::<Vec<_>>());
    let train: HashSet<u64> = seeds.iter().flat_map(|s| s.train_env_seeds.iter().copied()).collect();
    let disjoint = (0..config.eval_envs).all(|i| !train.contains(&eval_seed(i)));
    let errors: Vec<String> = seeds.iter().filter_map(|s| s.report.error.clone()).collect();
    let report = RunReport {
        command,
        task: config.task,
        split: config.split,
        memory_source: source,
        checkpoint_frames: if command == Command::Eval { vec![0] } else { checkpoint_frames(config) },
        final_success: pick(|r| r.success_rate),
        exploration_rate: pick(|r| r.exploration_rate),
        llm_invocation_rate: pick(|r| r.llm_invocation_rate),
        seeds: seeds.iter().map(|s| s.report.clone()).collect(),
        eval_seed_bit: EVAL_SEED_BIT,
        seeds_disjoint: disjoint,
        complete: errors.is_empty(),
        error: (!errors.is_empty()).then(|| errors.join("; ")),
        runtime: RuntimeInfo {
            wall_clock_s: started.map(|t| t.elapsed().as_secs_f64()),
            llm: client.map(|c| c.stats()),
        },
    };
    RunArtifacts {
        config: config.clone(),
        command,
        report,
        seeds,
    }
}

/// Trains one memory per seed (in parallel) with periodic evaluation.
pub fn run_training(config: &RunConfig) -> Result<RunArtifacts, HarnessError> {
    let client = config.make_client()?;
    run_training_with(config, client.as_ref())
}

pub fn run_training_with(config: &RunConfig, client: Option<&Arc<LlmClient>>) -> Result<RunArtifacts, HarnessError> {
    run_with(config, Command::Train, client)
}

fn run_with(config: &RunConfig, command: Command, client: Option<&Arc<LlmClient>>) -> Result<RunArtifacts, HarnessError> {
    config.validate(command)?;
    let started = config.record_timing.then(Instant::now);
    let foreign = load_foreign(config)?;
    let source = foreign.as_ref().map(source_tag);
    let seeds: Vec<SeedRun> = config
        .seeds
        .par_iter()
        .map(|&s| train_seed(config, s, client, foreign.as_ref()))
        .collect();
    Ok(assemble(config, command, seeds, source, started, client))
}

/// Training on `config.task` starting from a memory built on another task.
/// A zero frame budget evaluates the imported memory without training.
pub fn run_transfer(config: &RunConfig, source_memory: &Path) -> Result<RunArtifacts, HarnessError> {
    let client = config.make_client()?;
    run_transfer_with(config, source_memory, client.as_ref())
}

pub fn run_transfer_with(
    config: &RunConfig,
    source_memory: &Path,
    client: Option<&Arc<LlmClient>>,
) -> Result<RunArtifacts, HarnessError> {
    let mut cfg = config.clone();
    cfg.memory_in = Some(source_memory.to_path_buf());
    let source = EpisodicMemory::<f64>::load(source_memory)?;
    if source.metadata().canonical_form != crate::encoder::CANONICAL_FORM_VERSION {
        return Err(MemoryError::CanonicalForm {
            ours: crate::encoder::CANONICAL_FORM_VERSION,
            theirs: source.metadata().canonical_form,
        }
        .into());
    }
    run_with(&cfg, Command::Transfer, client)
}

/// Evaluates the memory in `config.memory_in` (or an empty one) once.
pub fn run_eval(config: &RunConfig) -> Result<RunArtifacts, HarnessError> {
    let client = config.make_client()?;
    run_eval_with(config, client.as_ref())
}

pub fn run_eval_with(config: &RunConfig, client: Option<&Arc<LlmClient>>) -> Result<RunArtifacts, HarnessError> {
    config.validate(Command::Eval)?;
    let started = config.record_timing.then(Instant::now);
    let loaded = load_foreign(config)?;
    let source = loaded.as_ref().map(source_tag);
    let memory = loaded.unwrap_or_else(|| new_memory(config));
    let eval = evaluate(&memory, config, config.task, config.split, config.eval_envs, client)?;
    let seed = config.seeds[0];
    let report = SeedReport {
        seed,
        frames: 0,
        episodes: 0,
        train_successes: 0,
        checkpoints: vec![CheckpointReport {
            frame: 0,
            success_rate: eval.report.success_rate,
            exploration_rate: eval.report.exploration_rate,
            llm_invocation_rate: eval.report.llm_invocation_rate,
            memory_keys: memory.len(),
            memory_pairs: memory.pair_count(),
        }],
        final_eval: Some(eval.report.clone()),
        memory_keys: memory.len(),
        memory_pairs: memory.pair_count(),
        commits: CommitStats::default(),
        controller: eval.report.controller,
        encode_failures: 0,
        graph_violations: 0,
        graph_parse_errors: 0,
        train_unlock_order: None,
        error: None,
    };
    let run = SeedRun {
        report,
        memory,
        episodes: Vec::new(),
        final_eval: Some(eval.episodes),
        train_env_seeds: Vec::new(),
    };
    Ok(assemble(config, Command::Eval, vec![run], source, started, client))
}

/// Config file written next to the outputs so a run can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRun {
    pub command: Command,
    pub config: RunConfig,
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn traces_jsonl(traces: &[DecisionTrace]) -> String {
    let mut s = String::new();
    for t in traces {
        s.push_str(&serde_json::to_string(t).expect("trace serializes"));
        s.push('\n');
    }
    s
}

pub fn learning_curve_csv(report: &RunReport) -> String {
    let mut out = String::from("frame");
    for s in &report.seeds {
        out.push_str(&format!(",seed_{}", s.seed));
    }
    out.push_str(",mean\n");
    for (i, frame) in report.checkpoint_frames.iter().enumerate() {
        let vals: Vec<f64> = report
            .seeds
            .iter()
            .filter_map(|s| s.checkpoints.get(i).map(|c| c.success_rate))
            .collect();
        out.push_str(&frame.to_string());
        for s in &report.seeds {
            match s.checkpoints.get(i) {
                Some(c) => out.push_str(&format!(",{}", c.success_rate)),
                None => out.push(','),
            }
        }
        out.push_str(&format!(",{}\n", MeanStd::of(&vals).mean));
    }
    out
}

pub fn summary_json(report: &RunReport) -> serde_json::Value {
    let frames: Vec<u64> = report.seeds.iter().map(|s| s.frames).collect();
    serde_json::json!({
        "rows": [{
            "task": report.task.name(),
            "split": report.split.to_string(),
            "memory_source": report.memory_source,
            "success_mean": report.final_success.mean,
            "success_std": report.final_success.std,
            "seeds": report.final_success.n,
            "frames": frames,
        }],
        "complete": report.complete,
    })
}

pub fn invocation_rate_csv(report: &RunReport) -> String {
    format!(
        "task,split,exploration_rate_mean,exploration_rate_std,llm_invocation_rate_mean,llm_invocation_rate_std\n{},{},{},{},{},{}\n",
        report.task.name(),
        report.split,
        report.exploration_rate.mean,
        report.exploration_rate.std_text(),
        report.llm_invocation_rate.mean,
        report.llm_invocation_rate.std_text(),
    )
}

/// One row per (task, memory source) pair.
pub fn transfer_csv(rows: &[(TaskKind, String, MeanStd)]) -> String {
    let mut out = String::from("task,memory_source,success_mean,success_std\n");
    for (task, source, m) in rows {
        out.push_str(&format!("{},{},{},{}\n", task.name(), source, m.mean, m.std_text()));
    }
    out
}

/// Writes every artifact of a run under `dir`.
pub fn emit_outputs(artifacts: &RunArtifacts, dir: &Path) -> Result<(), HarnessError> {
    let report = &artifacts.report;
    let stored = StoredRun {
        command: artifacts.command,
        config: artifacts.config.clone(),
    };
    write_file(&dir.join("config.json"), &serde_json::to_string_pretty(&stored).expect("config serializes"))?;
    write_file(&dir.join("report.json"), &serde_json::to_string_pretty(report).expect("report serializes"))?;
    write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary_json(report)).expect("json"))?;
    write_file(&dir.join("learning_curve.csv"), &learning_curve_csv(report))?;
    write_file(&dir.join("invocation_rate.csv"), &invocation_rate_csv(report))?;
    if let Some(src) = &report.memory_source {
        write_file(
            &dir.join("transfer.csv"),
            &transfer_csv(&[(report.task, src.clone(), report.final_success)]),
        )?;
    }
    for s in &artifacts.seeds {
        let seed_dir = format!("seed_{}", s.report.seed);
        if artifacts.command != Command::Eval {
            s.memory.save(&dir.join("memory").join(format!("{seed_dir}.jsonl")))?;
        }
        if artifacts.config.write_traces {
            for (i, ep) in s.episodes.iter().enumerate() {
                write_file(
                    &dir.join("traces").join(&seed_dir).join(format!("episode_{i}.jsonl")),
                    &traces_jsonl(&ep.traces),
                )?;
            }
            for (i, ep) in s.final_eval.iter().flatten().enumerate() {
                write_file(
                    &dir.join("traces").join(&seed_dir).join("eval").join(format!("episode_{i}.jsonl")),
                    &traces_jsonl(&ep.traces),
                )?;
            }
        }
    }
    Ok(())
}

/// Reads back the training traces of one seed, in episode order.
pub fn read_training_traces(dir: &Path, seed: u64) -> Result<Vec<Vec<DecisionTrace>>, HarnessError> {
    let seed_dir = dir.join("traces").join(format!("seed_{seed}"));
    let mut out = Vec::new();
    for i in 0.. {
        let p = seed_dir.join(format!("episode_{i}.jsonl"));
        if !p.exists() {
            break;
        }
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let traces = text
            .lines()
            .enumerate()
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .map_err(|e| HarnessError::Config(format!("{}: line {}: {e}", p.display(), n + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(traces);
    }
    Ok(out)
}

pub struct ReplayOutcome {
    pub identical: bool,
    pub differences: Vec<String>,
    pub artifacts: RunArtifacts,
}

/// Re-executes a stored run in cache-only mode and compares the results
/// with what was written the first time.
pub fn replay(run_dir: &Path, cache_dir: Option<&Path>) -> Result<ReplayOutcome, HarnessError> {
    let stored_path = run_dir.join("config.json");
    let text = fs::read_to_string(&stored_path).map_err(io_err(&stored_path))?;
    let stored: StoredRun =
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", stored_path.display())))?;
    let mut config = stored.config.clone();
    if config.uses_llm() {
        config.mode = CacheMode::CacheOnly;
        if let Some(c) = cache_dir {
            config.cache_dir = Some(c.to_path_buf());
        }
    }
    let client = config.make_client()?;
    replay_with(run_dir, &stored, config, client.as_ref())
}

pub fn replay_with(
    run_dir: &Path,
    stored: &StoredRun,
    config: RunConfig,
    client: Option<&Arc<LlmClient>>,
) -> Result<ReplayOutcome, HarnessError> {
    let report_path = run_dir.join("report.json");
    let text = fs::read_to_string(&report_path).map_err(io_err(&report_path))?;
    let original: RunReport =
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", report_path.display())))?;
    let artifacts = match stored.command {
        Command::Train => run_training_with(&config, client)?,
        Command::Eval => run_eval_with(&config, client)?,
        Command::Transfer => {
            let src = config
                .memory_in
                .clone()
                .ok_or_else(|| HarnessError::Config("stored transfer run has no memory_in".into()))?;
            run_transfer_with(&config, &src, client)?
        }
    };
    let mut differences = Vec::new();
    if artifacts.report.comparable() != original.comparable() {
        differences.push("report metrics differ".to_string());
    }
    if stored.config.write_traces && stored.command != Command::Eval {
        for s in &artifacts.seeds {
            let on_disk = read_training_traces(run_dir, s.report.seed)?;
            let now: Vec<Vec<DecisionTrace>> = s.episodes.iter().map(|e| e.traces.clone()).collect();
            if on_disk.len() != now.len() {
                differences.push(format!("seed {}: {} episodes on disk, {} replayed", s.report.seed, on_disk.len(), now.len()));
            } else if let Some(i) = (0..now.len()).find(|&i| strip_latency(&on_disk[i]) != strip_latency(&now[i])) {
                differences.push(format!("seed {}: first trace mismatch in episode {i}", s.report.seed));
            }
        }
    }
    Ok(ReplayOutcome {
        identical: differences.is_empty(),
        differences,
        artifacts,
    })
}

fn strip_latency(traces: &[DecisionTrace]) -> Vec<DecisionTrace> {
    traces
        .iter()
        .cloned()
        .map(|mut t| {
            t.latency_us = None;
            t
        })
        .collect()
}
