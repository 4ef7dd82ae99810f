//! Explore/exploit arbitration.
//!
//! A step is critical when the encoded state names a direction to the
//! current target. Critical steps consult episodic memory and act on the
//! best stored action; everything else goes to the exploration policy.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{format_state_key, CanonicalKey, StateKey, MAX_REPROMPTS};
use crate::gridworld::{
    visible_cells, Action, Direction, DoorState, EntityKind, FullState, Item, Observation, Position, TaskKind, TaskSpec,
    Tile,
};
use crate::llm::{ChatMessage, LlmClient, LlmError};
use crate::memory::ValueStore;
use crate::prompts;
use crate::scalar::Scalar;
use crate::world_graph::WorldGraph;

/// Number of (observation, action) pairs shown to the exploration model.
pub const HISTORY_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Explore,
    Exploit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Episodic,
    LlmPolicy,
    ScriptedPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub step: u32,
    pub mode: Mode,
    pub critical: bool,
    pub key: Option<CanonicalKey>,
    pub action: Action,
    pub source: DecisionSource,
    /// Episodic memory reads made while deciding this step.
    pub memory_lookups: u32,
    /// Retrieved value when exploiting.
    pub value: Option<f64>,
    pub latency_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Counters for recoverable backend failures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerStats {
    pub critic_unparseable: u64,
    pub critic_errors: u64,
    pub explorer_fallbacks: u64,
    pub epsilon_explores: u64,
}

impl ControllerStats {
    pub fn add(&mut self, o: &ControllerStats) {
        self.critic_unparseable += o.critic_unparseable;
        self.critic_errors += o.critic_errors;
        self.explorer_fallbacks += o.explorer_fallbacks;
        self.epsilon_explores += o.epsilon_explores;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticBackend {
    Oracle,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorerBackend {
    Scripted,
    Llm,
}

macro_rules! backend_names {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok(Self::$v),)+
                    other => Err(format!("unknown backend `{other}`")),
                }
            }
        }
    };
}

backend_names!(CriticBackend, Oracle => "oracle", Llm => "llm");
backend_names!(ExplorerBackend, Scripted => "scripted", Llm => "llm");

/// Strict yes/no reading of a criticality reply. A trailing period and
/// surrounding quotes are tolerated, nothing else.
pub fn parse_critic_reply(text: &str) -> Option<bool> {
    let t = text.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`').trim();
    let t = t.strip_suffix('.').unwrap_or(t).to_ascii_lowercase();
    match t.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

pub fn build_critic_prompt(task: TaskKind, mission: &str, key: &StateKey) -> String {
    prompts::fill(
        prompts::CRITIC,
        &[
            ("game description", &prompts::game_description(task)),
            ("mission", mission),
            ("observation after embedding", &format_state_key(key)),
        ],
    )
}

/// The predicate the criticality prompt asks for.
pub fn oracle_is_critical(key: &StateKey) -> bool {
    !key.target_directions.is_empty()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticVerdict {
    pub critical: bool,
    /// The reply never parsed; `critical` is false.
    pub unparseable: bool,
}

pub trait CriticalityJudge: Send {
    fn judge(&mut self, key: &StateKey, task: TaskKind, mission: &str) -> Result<CriticVerdict, LlmError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleCritic;

impl CriticalityJudge for OracleCritic {
    fn judge(&mut self, key: &StateKey, _task: TaskKind, _mission: &str) -> Result<CriticVerdict, LlmError> {
        Ok(CriticVerdict {
            critical: oracle_is_critical(key),
            unparseable: false,
        })
    }
}

pub struct LlmCritic {
    client: Arc<LlmClient>,
}

impl LlmCritic {
    pub fn new(client: Arc<LlmClient>) -> Self {
        Self { client }
    }
}

impl CriticalityJudge for LlmCritic {
    fn judge(&mut self, key: &StateKey, task: TaskKind, mission: &str) -> Result<CriticVerdict, LlmError> {
        let mut messages = vec![ChatMessage::user(build_critic_prompt(task, mission, key))];
        for _ in 0..=MAX_REPROMPTS {
            let reply = self.client.prompt(messages.clone())?;
            if let Some(critical) = parse_critic_reply(&reply) {
                return Ok(CriticVerdict {
                    critical,
                    unparseable: false,
                });
            }
            messages.push(ChatMessage::assistant(reply));
            messages.push(ChatMessage::user("Answer with exactly one word: yes or no."));
        }
        Ok(CriticVerdict {
            critical: false,
            unparseable: true,
        })
    }
}

/// Best stored action for the key; `None` on a miss.
pub fn exploit<S: Scalar>(memory: &dyn ValueStore<S>, key: &CanonicalKey) -> Option<(Action, S)> {
    memory.best_action(key)
}

/// What an exploration policy may look at.
///
/// `state` is ground truth; the scripted explorer reads only the cells in
/// the agent's view, its own pose and its hands from it.
pub struct ExploreContext<'a> {
    pub observation: &'a Observation,
    pub state: &'a FullState,
    pub spec: &'a TaskSpec,
    pub graph: &'a WorldGraph,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExploreChoice {
    pub action: Action,
    pub source: DecisionSource,
    pub note: Option<String>,
}

pub trait Explorer: Send {
    fn reset(&mut self, episode_seed: u64);
    /// Called at the start of every step, whichever policy acts.
    fn observe(&mut self, ctx: &ExploreContext<'_>);
    fn choose(&mut self, ctx: &ExploreContext<'_>) -> ExploreChoice;
    /// Called with the action actually taken this step.
    fn record(&mut self, ctx: &ExploreContext<'_>, action: Action);
}

/// Deterministic frontier explorer with optional epsilon-random moves.
///
/// Keeps a map of every cell it has seen. Each step it walks toward the
/// nearest door it has not passed through or, failing that, the nearest
/// seen free cell bordering unseen space. Closed doors are opened when
/// faced. Keys matching a locked door in UnlockLocal and the mission object
/// in pickup tasks are taken when faced.
#[derive(Debug, Clone)]
pub struct ScriptedExplorer {
    pub epsilon: f64,
    /// Pick up the mission object when facing it.
    pub collect_targets: bool,
    rng: ChaCha8Rng,
    seen: HashMap<Position, Tile>,
    visited: HashSet<Position>,
    last_faced: [u64; 4],
    clock: u64,
    last_turn: Option<Action>,
}

const DOOR_BONUS: i64 = 4;
const NEIGHBORS: [Direction; 4] = Direction::ALL;

impl ScriptedExplorer {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            collect_targets: true,
            rng: ChaCha8Rng::seed_from_u64(0),
            seen: HashMap::new(),
            visited: HashSet::new(),
            last_faced: [0; 4],
            clock: 0,
            last_turn: None,
        }
    }

    pub fn deterministic() -> Self {
        Self::new(0.0)
    }

    fn passable(&self, p: Position, carrying: Option<Item>) -> bool {
        match self.seen.get(&p) {
            Some(Tile::Floor) => true,
            Some(Tile::Door { state, color }) => match state {
                DoorState::Open | DoorState::Closed => true,
                DoorState::Locked => carrying == Some(Item::new(*color, EntityKind::Key)),
            },
            _ => false,
        }
    }

    fn is_frontier(&self, p: Position) -> bool {
        NEIGHBORS.iter().any(|d| {
            let (dx, dy) = d.vector();
            !self.seen.contains_key(&p.offset(dx, dy))
        })
    }

    /// First cell on the way to the best goal, if any goal is reachable.
    fn next_cell(&self, s: &FullState) -> Option<Position> {
        let start = s.agent.pos;
        let mut parent: HashMap<Position, Position> = HashMap::new();
        let mut dist: HashMap<Position, i64> = HashMap::from([(start, 0)]);
        let mut queue = VecDeque::from([start]);
        let mut best: Option<(i64, Position)> = None;
        while let Some(p) = queue.pop_front() {
            let d = dist[&p];
            if p != start {
                let is_door = matches!(self.seen.get(&p), Some(Tile::Door { .. }));
                let score = if is_door && !self.visited.contains(&p) {
                    Some(d - DOOR_BONUS)
                } else if self.is_frontier(p) {
                    Some(d)
                } else {
                    None
                };
                if let Some(sc) = score {
                    if best.is_none_or(|(b, _)| sc < b) {
                        best = Some((sc, p));
                    }
                }
            }
            for dir in NEIGHBORS {
                let (dx, dy) = dir.vector();
                let q = p.offset(dx, dy);
                if !dist.contains_key(&q) && self.passable(q, s.carrying) {
                    dist.insert(q, d + 1);
                    parent.insert(q, p);
                    queue.push_back(q);
                }
            }
        }
        let (_, mut goal) = best?;
        while let Some(&p) = parent.get(&goal) {
            if p == start {
                return Some(goal);
            }
            goal = p;
        }
        None
    }

    /// Turn toward `want`; for a cell behind, keep turning the same way or
    /// pick the side faced least recently.
    fn turn_toward(&self, facing: Direction, want: Direction) -> Action {
        if want == facing.left() {
            Action::TurnLeft
        } else if want == facing.right() {
            Action::TurnRight
        } else if let Some(t) = self.last_turn {
            t
        } else if self.last_faced[facing.left().index()] <= self.last_faced[facing.right().index()] {
            Action::TurnLeft
        } else {
            Action::TurnRight
        }
    }

    fn scripted_action(&mut self, ctx: &ExploreContext<'_>) -> Action {
        let s = ctx.state;
        let front = s.front();
        match s.tile(front) {
            Tile::Object { color, kind } if s.carrying.is_none() => {
                let item = Item::new(color, kind);
                let wanted = match s.task {
                    TaskKind::UnlockLocal => item == Item::new(s.target.color, EntityKind::Key),
                    TaskKind::PickupLocal | TaskKind::FindObj => self.collect_targets && item == s.target,
                    TaskKind::GoToLocal => false,
                };
                if wanted {
                    return Action::PickUp;
                }
            }
            Tile::Door { state: DoorState::Closed, .. } => return Action::Toggle,
            Tile::Door { state: DoorState::Locked, color } if s.carrying == Some(Item::new(color, EntityKind::Key)) => {
                return Action::Toggle;
            }
            _ => {}
        }
        // Unseen space right beside the agent: look before walking.
        for want in [s.agent.dir.left(), s.agent.dir.right(), s.agent.dir.left().left()] {
            let (dx, dy) = want.vector();
            if !self.seen.contains_key(&s.agent.pos.offset(dx, dy)) {
                return self.turn_toward(s.agent.dir, want);
            }
        }
        if let Some(next) = self.next_cell(s) {
            if next == front {
                return Action::GoForward;
            }
            let want = NEIGHBORS
                .into_iter()
                .find(|d| {
                    let (dx, dy) = d.vector();
                    s.agent.pos.offset(dx, dy) == next
                })
                .expect("next cell is adjacent");
            return self.turn_toward(s.agent.dir, want);
        }
        // Nothing left to explore.
        if self.passable(front, s.carrying) && self.last_turn.is_some() {
            return Action::GoForward;
        }
        let l = self.last_faced[s.agent.dir.left().index()];
        let r = self.last_faced[s.agent.dir.right().index()];
        if l <= r {
            Action::TurnLeft
        } else {
            Action::TurnRight
        }
    }
}

impl Explorer for ScriptedExplorer {
    fn reset(&mut self, episode_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed);
        self.seen.clear();
        self.visited.clear();
        self.last_faced = [0; 4];
        self.clock = 0;
        self.last_turn = None;
    }

    fn observe(&mut self, ctx: &ExploreContext<'_>) {
        let s = ctx.state;
        self.clock += 1;
        for (_, p) in visible_cells(s) {
            self.seen.insert(p, s.tile(p));
        }
        self.seen.insert(s.agent.pos, s.tile(s.agent.pos));
        self.visited.insert(s.agent.pos);
        self.last_faced[s.agent.dir.index()] = self.clock;
    }

    fn choose(&mut self, ctx: &ExploreContext<'_>) -> ExploreChoice {
        let action = if self.epsilon > 0.0 && self.rng.gen::<f64>() < self.epsilon {
            [Action::TurnLeft, Action::TurnRight, Action::GoForward][self.rng.gen_range(0..3)]
        } else {
            self.scripted_action(ctx)
        };
        ExploreChoice {
            action,
            source: DecisionSource::ScriptedPolicy,
            note: None,
        }
    }

    fn record(&mut self, _ctx: &ExploreContext<'_>, action: Action) {
        self.last_turn = match action {
            Action::TurnLeft | Action::TurnRight => Some(action),
            _ => None,
        };
    }
}

/// Reads the last `Action: <x>` line of a reply.
pub fn parse_explorer_reply(text: &str) -> Option<Action> {
    text.lines().rev().find_map(|raw| {
        let line = raw.replace("**", "").replace('`', "");
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let idx = line.to_ascii_lowercase().find("action:")?;
        let rest = line[idx + "action:".len()..].trim().trim_end_matches('.').trim_matches('"');
        rest.to_ascii_lowercase().parse().ok()
    })
}

pub fn build_explorer_prompt(
    spec: &TaskSpec,
    mission: &str,
    graph: &WorldGraph,
    history: &[(String, Action)],
    observation: &Observation,
) -> String {
    let history_text = if history.is_empty() {
        "none".to_string()
    } else {
        history
            .iter()
            .map(|(obs, a)| format!("Observation: {}\nAction: {}", obs.replace('\n', "; "), a.phrase()))
            .collect::<Vec<_>>()
            .join("\n")
    };
    prompts::fill(
        prompts::EXPLORER,
        &[
            ("game description", &prompts::game_description(spec.task)),
            ("mission", mission),
            ("action space", &prompts::action_space()),
            ("world model", &graph.serialize()),
            ("history", &history_text),
            ("observation", &observation.to_text()),
            ("Format requirements", prompts::EXPLORER_FORMAT.trim_end()),
        ],
    )
}

/// Exploration through the decision model, with the scripted explorer as a
/// per-step fallback.
pub struct LlmExplorer {
    client: Arc<LlmClient>,
    history: VecDeque<(String, Action)>,
    fallback: ScriptedExplorer,
}

impl LlmExplorer {
    pub fn new(client: Arc<LlmClient>) -> Self {
        Self {
            client,
            history: VecDeque::new(),
            fallback: ScriptedExplorer::deterministic(),
        }
    }

    fn ask(&self, ctx: &ExploreContext<'_>) -> Result<Option<Action>, LlmError> {
        let history: Vec<_> = self.history.iter().cloned().collect();
        let prompt = build_explorer_prompt(ctx.spec, &ctx.observation.mission, ctx.graph, &history, ctx.observation);
        let mut messages = vec![ChatMessage::user(prompt)];
        for _ in 0..=MAX_REPROMPTS {
            let reply = self.client.prompt(messages.clone())?;
            if let Some(a) = parse_explorer_reply(&reply) {
                return Ok(Some(a));
            }
            messages.push(ChatMessage::assistant(reply));
            messages.push(ChatMessage::user(format!(
                "Reply with one line `Action: <action>` using one of: {}.",
                prompts::action_space()
            )));
        }
        Ok(None)
    }
}

impl Explorer for LlmExplorer {
    fn reset(&mut self, episode_seed: u64) {
        self.history.clear();
        self.fallback.reset(episode_seed);
    }

    fn observe(&mut self, ctx: &ExploreContext<'_>) {
        self.fallback.observe(ctx);
    }

    fn choose(&mut self, ctx: &ExploreContext<'_>) -> ExploreChoice {
        let (note, err) = match self.ask(ctx) {
            Ok(Some(action)) => {
                return ExploreChoice {
                    action,
                    source: DecisionSource::LlmPolicy,
                    note: None,
                }
            }
            Ok(None) => ("explorer reply unparseable; scripted fallback".to_string(), None),
            Err(e) => (format!("explorer backend error: {e}; scripted fallback"), Some(e)),
        };
        if let Some(e) = err {
            tracing::warn!(error = %e, "exploration model unavailable this step");
        }
        let mut choice = self.fallback.choose(ctx);
        choice.note = Some(note);
        choice
    }

    fn record(&mut self, ctx: &ExploreContext<'_>, action: Action) {
        self.history.push_back((ctx.observation.to_text(), action));
        while self.history.len() > HISTORY_WINDOW {
            self.history.pop_front();
        }
        self.fallback.record(ctx, action);
    }
}

/// Per-episode decision maker.
pub struct Controller {
    critic: Box<dyn CriticalityJudge>,
    explorer: Box<dyn Explorer>,
    /// Probability of exploring at a critical step without consulting memory.
    pub exploit_epsilon: f64,
    pub record_timing: bool,
    rng: ChaCha8Rng,
    stats: ControllerStats,
}

impl Controller {
    pub fn new(critic: Box<dyn CriticalityJudge>, explorer: Box<dyn Explorer>) -> Self {
        Self {
            critic,
            explorer,
            exploit_epsilon: 0.0,
            record_timing: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            stats: ControllerStats::default(),
        }
    }

    pub fn oracle(explorer_epsilon: f64) -> Self {
        Self::new(Box::new(OracleCritic), Box::new(ScriptedExplorer::new(explorer_epsilon)))
    }

    pub fn reset(&mut self, episode_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed ^ 0x5eed_c0de);
        self.explorer.reset(episode_seed);
    }

    pub fn stats(&self) -> ControllerStats {
        self.stats
    }

    pub fn take_stats(&mut self) -> ControllerStats {
        std::mem::take(&mut self.stats)
    }

    /// Picks the action for one step. `key` is `None` when encoding failed;
    /// such steps explore.
    pub fn decide<S: Scalar>(
        &mut self,
        step: u32,
        key: Option<&StateKey>,
        memory: &dyn ValueStore<S>,
        ctx: &ExploreContext<'_>,
    ) -> (Action, DecisionTrace) {
        let started = self.record_timing.then(Instant::now);
        self.explorer.observe(ctx);
        let mut notes = Vec::new();
        let mut critical = false;
        let mut lookups = 0;
        let mut hit = None;
        let mut random = None;
        let canonical = key.map(StateKey::canonical);

        if let (Some(k), Some(ck)) = (key, canonical.as_ref()) {
            match self.critic.judge(k, ctx.spec.task, &ctx.observation.mission) {
                Ok(v) => {
                    critical = v.critical;
                    if v.unparseable {
                        self.stats.critic_unparseable += 1;
                        notes.push("criticality reply unparseable; treated as non-critical".to_string());
                    }
                }
                Err(e) => {
                    self.stats.critic_errors += 1;
                    notes.push(format!("criticality backend error: {e}"));
                }
            }
            if critical {
                if self.exploit_epsilon > 0.0 && self.rng.gen::<f64>() < self.exploit_epsilon {
                    self.stats.epsilon_explores += 1;
                    random = Some(Action::ALL[self.rng.gen_range(0..Action::ALL.len())]);
                } else {
                    lookups += 1;
                    hit = exploit(memory, ck);
                }
            }
        } else {
            notes.push("state encoding failed".to_string());
        }

        let (action, mode, source, value) = match (hit, random) {
            (Some((a, v)), _) => (a, Mode::Exploit, DecisionSource::Episodic, Some(v.to_f64_lossy())),
            (None, Some(a)) => {
                notes.push("epsilon random action".to_string());
                (a, Mode::Explore, DecisionSource::ScriptedPolicy, None)
            }
            (None, None) => {
                let choice = self.explorer.choose(ctx);
                if let Some(n) = choice.note {
                    self.stats.explorer_fallbacks += 1;
                    notes.push(n);
                }
                (choice.action, Mode::Explore, choice.source, None)
            }
        };
        self.explorer.record(ctx, action);
        let trace = DecisionTrace {
            step,
            mode,
            critical,
            key: canonical,
            action,
            source,
            memory_lookups: lookups,
            value,
            latency_us: started.map(|t| t.elapsed().as_micros() as u64),
            notes,
        };
        (action, trace)
    }
}
