//! Semantic state keys.
//!
//! An observation is reduced to a small discrete record: where the current
//! target is (direction phrases only, no distances), whether the agent
//! carries something, what sits in the three adjacent probe cells, and
//! whether the target is directly ahead. The record's canonical string is
//! the episodic memory key.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::view::{visible_cells, DirectionPhrase, EgoOffset};
use crate::gridworld::{DoorState, EntityKind, FullState, Item, Observation, TaskKind, TaskSpec, Tile};
use crate::llm::{ChatMessage, LlmClient};
use crate::prompts;

/// Bumped whenever the canonical serialization changes.
pub const CANONICAL_FORM_VERSION: u32 = 1;

/// Re-prompts after the first malformed reply.
pub const MAX_REPROMPTS: usize = 2;

/// What occupies a probe cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Obstacle {
    Wall,
    Object(EntityKind),
    Door(DoorState),
}

impl Obstacle {
    pub fn from_tile(tile: Tile) -> Option<Self> {
        match tile {
            Tile::Floor => None,
            Tile::Wall => Some(Self::Wall),
            Tile::Door { state, .. } => Some(Self::Door(state)),
            Tile::Object { kind, .. } => Some(Self::Object(kind)),
        }
    }
}

impl fmt::Display for Obstacle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Wall => f.write_str("wall"),
            Self::Object(k) => f.write_str(k.name()),
            Self::Door(s) => write!(f, "{} door", s.name()),
        }
    }
}

impl FromStr for Obstacle {
    type Err = String;

    /// Accepts "wall", "ball", "red ball", "locked door", "yellow locked door".
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let words: Vec<String> = s
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase())
            .filter(|w| !w.is_empty() && !matches!(w.as_str(), "a" | "an" | "the"))
            .collect();
        let Some(last) = words.last() else {
            return Err("empty obstacle".into());
        };
        let kind: EntityKind = last.parse()?;
        match kind {
            EntityKind::Wall => Ok(Self::Wall),
            EntityKind::Door => words
                .iter()
                .rev()
                .skip(1)
                .find_map(|w| w.parse::<DoorState>().ok())
                .map(Self::Door)
                .ok_or_else(|| format!("door without state: `{s}`")),
            k => Ok(Self::Object(k)),
        }
    }
}

/// Contents of the three probe cells; `None` means nothing there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct Obstacles {
    pub forward: Option<Obstacle>,
    pub left: Option<Obstacle>,
    pub right: Option<Obstacle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct StateKey {
    pub target_directions: Vec<DirectionPhrase>,
    pub carrying: bool,
    pub obstacles: Obstacles,
    pub target_one_step_forward: bool,
}

/// Canonical serialization of a [`StateKey`].
///
/// Lowercase, fields in step order, `;` between fields, `,` between list
/// entries. Frozen as canonical form version 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CanonicalKey(String);

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn probe_text(o: Option<Obstacle>) -> String {
    o.map_or_else(|| "no".to_string(), |o| o.to_string())
}

impl StateKey {
    pub fn canonical(&self) -> CanonicalKey {
        canonicalize(self)
    }

    pub fn is_target_visible(&self) -> bool {
        !self.target_directions.is_empty()
    }
}

pub fn canonicalize(key: &StateKey) -> CanonicalKey {
    let targets: Vec<&str> = key.target_directions.iter().map(|d| d.text()).collect();
    CanonicalKey(format!(
        "targets={};carrying={};forward_1={};left_1={};right_1={};target_1_forward={}",
        targets.join(","),
        yes_no(key.carrying),
        probe_text(key.obstacles.forward),
        probe_text(key.obstacles.left),
        probe_text(key.obstacles.right),
        yes_no(key.target_one_step_forward),
    ))
}

impl CanonicalKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Parses and validates a canonical string.
    pub fn parse(s: &str) -> Result<Self, ParseError> {
        let key = Self::decode_str(s)?;
        let canon = canonicalize(&key);
        if canon.0 != s {
            return Err(ParseError::new(s, "not in canonical form"));
        }
        Ok(canon)
    }

    pub fn decode(&self) -> StateKey {
        Self::decode_str(&self.0).expect("canonical keys always decode")
    }

    fn decode_str(s: &str) -> Result<StateKey, ParseError> {
        let err = |m: &str| ParseError::new(s, m);
        let fields: Vec<&str> = s.split(';').collect();
        let names = ["targets", "carrying", "forward_1", "left_1", "right_1", "target_1_forward"];
        if fields.len() != names.len() {
            return Err(err("wrong field count"));
        }
        let mut values = Vec::new();
        for (field, name) in fields.iter().zip(names) {
            let v = field
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| err(&format!("expected field `{name}`")))?;
            values.push(v);
        }
        let target_directions = if values[0].is_empty() {
            Vec::new()
        } else {
            values[0]
                .split(',')
                .map(|p| p.parse::<DirectionPhrase>().map_err(|e| err(&e)))
                .collect::<Result<_, _>>()?
        };
        let flag = |v: &str| match v {
            "yes" => Ok(true),
            "no" => Ok(false),
            _ => Err(err("expected yes/no")),
        };
        let probe = |v: &str| -> Result<Option<Obstacle>, ParseError> {
            if v == "no" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|e: String| err(&e))
            }
        };
        Ok(StateKey {
            target_directions,
            carrying: flag(values[1])?,
            obstacles: Obstacles {
                forward: probe(values[2])?,
                left: probe(values[3])?,
                right: probe(values[4])?,
            },
            target_one_step_forward: flag(values[5])?,
        })
    }
}

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse `{line}`: {message}")]
pub struct ParseError {
    pub line: String,
    pub message: String,
}

impl ParseError {
    pub fn new(line: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line: line.into(),
            message: message.into(),
        }
    }
}

/// The three parts of an encoder prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub env_description: String,
    pub raw_state: String,
    pub task_instruction: String,
}

impl EncoderInput {
    pub fn new(task: TaskKind, observation: &Observation) -> Self {
        Self {
            env_description: prompts::game_description(task),
            raw_state: observation.to_text(),
            task_instruction: observation.mission.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("prompt slot `{0}` is empty")]
pub struct MissingSlot(pub &'static str);

pub fn build_encoder_prompt(input: &EncoderInput) -> Result<String, MissingSlot> {
    if input.env_description.trim().is_empty() {
        return Err(MissingSlot("Environment description"));
    }
    if input.raw_state.trim().is_empty() {
        return Err(MissingSlot("observation"));
    }
    if input.task_instruction.trim().is_empty() {
        return Err(MissingSlot("Mission"));
    }
    Ok(prompts::fill(
        prompts::ENCODER,
        &[
            ("Environment description", &input.env_description),
            ("Mission", &input.task_instruction),
            ("observation", &input.raw_state),
            ("Format requirements", prompts::ENCODER_FORMAT.trim_end()),
        ],
    ))
}

/// Renders a key in the reply format the encoder prompt asks for.
pub fn format_state_key(key: &StateKey) -> String {
    let targets = if key.target_directions.is_empty() {
        "none".to_string()
    } else {
        key.target_directions
            .iter()
            .map(|d| format!("target {d}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!(
        "Targets: {targets}\nCarrying: {}\n1 step forward: {}\n1 step left: {}\n1 step right: {}\nTarget 1 step forward: {}",
        yes_no(key.carrying),
        probe_text(key.obstacles.forward),
        probe_text(key.obstacles.left),
        probe_text(key.obstacles.right),
        yes_no(key.target_one_step_forward),
    )
}

fn clean_line(line: &str) -> String {
    line.trim()
        .trim_start_matches(['-', '*', '#', '>', ' '])
        .replace("**", "")
        .replace('`', "")
        .trim()
        .to_string()
}

fn parse_flag(line: &str, v: &str) -> Result<bool, ParseError> {
    match v.trim().trim_end_matches('.').trim_matches('"').to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(ParseError::new(line, "expected yes or no")),
    }
}

fn parse_probe(line: &str, v: &str) -> Result<Option<Obstacle>, ParseError> {
    let v = v.trim().trim_end_matches('.').trim_matches('"').to_ascii_lowercase();
    if v.chars().any(|c| c.is_ascii_digit()) {
        return Err(ParseError::new(line, "numbers are not allowed"));
    }
    if matches!(v.as_str(), "no" | "none" | "nothing" | "") {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|e: String| ParseError::new(line, e))
}

fn parse_targets(line: &str, v: &str) -> Result<Vec<DirectionPhrase>, ParseError> {
    let v = v.trim().trim_end_matches('.').to_ascii_lowercase();
    if v.chars().any(|c| c.is_ascii_digit()) {
        return Err(ParseError::new(line, "numbers are not allowed in direction phrases"));
    }
    if matches!(v.as_str(), "none" | "no" | "" | "[]") {
        return Ok(Vec::new());
    }
    v.trim_matches(['[', ']'])
        .split([',', ';'])
        .map(|entry| {
            let entry = entry.trim().trim_matches('"').trim();
            let phrase = entry.strip_prefix("target").unwrap_or(entry).trim();
            phrase.parse().map_err(|e: String| ParseError::new(line, e))
        })
        .collect()
}

/// Extracts a [`StateKey`] from an encoder reply.
///
/// Reasoning text before the answer lines is ignored; when a field appears
/// more than once the last occurrence wins.
pub fn parse_encoder_output(text: &str) -> Result<StateKey, ParseError> {
    let mut targets = None;
    let mut carrying = None;
    let mut forward = None;
    let mut left = None;
    let mut right = None;
    let mut target_forward = None;

    for raw in text.lines() {
        let line = clean_line(raw);
        let lower = line.to_ascii_lowercase();
        let Some((field, value)) = lower.split_once(':') else {
            continue;
        };
        let field = field.trim();
        match field {
            "targets" => targets = Some(parse_targets(raw, value)?),
            "carrying" => carrying = Some(parse_flag(raw, value)?),
            "1 step forward" => forward = Some(parse_probe(raw, value)?),
            "1 step left" => left = Some(parse_probe(raw, value)?),
            "1 step right" => right = Some(parse_probe(raw, value)?),
            "target 1 step forward" => target_forward = Some(parse_flag(raw, value)?),
            _ => {}
        }
    }

    let missing = |name: &str| ParseError::new(format!("<missing line `{name}:`>"), "incomplete reply");
    Ok(StateKey {
        target_directions: targets.ok_or_else(|| missing("Targets"))?,
        carrying: carrying.ok_or_else(|| missing("Carrying"))?,
        obstacles: Obstacles {
            forward: forward.ok_or_else(|| missing("1 step forward"))?,
            left: left.ok_or_else(|| missing("1 step left"))?,
            right: right.ok_or_else(|| missing("1 step right"))?,
        },
        target_one_step_forward: target_forward.ok_or_else(|| missing("Target 1 step forward"))?,
    })
}

/// The object the agent should currently look for.
///
/// In UnlockLocal the matching key comes first; the door becomes the target
/// once the key is in hand.
pub fn current_target(state: &FullState) -> Item {
    match state.task {
        TaskKind::UnlockLocal => {
            let key = Item::new(state.target.color, EntityKind::Key);
            if state.carrying == Some(key) {
                state.target
            } else {
                key
            }
        }
        _ => state.target,
    }
}

/// Computes the key straight from ground truth.
pub fn oracle_encode(state: &FullState, _spec: &TaskSpec) -> StateKey {
    let target = current_target(state);
    let target_cells: Vec<EgoOffset> = visible_cells(state)
        .into_iter()
        .filter(|(_, p)| state.tile(*p).item() == Some(target))
        .map(|(o, _)| o)
        .collect();
    let probe = |o: EgoOffset| Obstacle::from_tile(state.tile(o.to_world(state.agent)));
    StateKey {
        target_directions: target_cells.iter().filter_map(|o| o.phrase()).collect(),
        carrying: state.carrying.is_some(),
        obstacles: Obstacles {
            forward: probe(EgoOffset::new(0, 1)),
            left: probe(EgoOffset::new(-1, 0)),
            right: probe(EgoOffset::new(1, 0)),
        },
        target_one_step_forward: target_cells.contains(&EgoOffset::new(0, 1)),
    }
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("encoder reply unparseable after {attempts} attempts: {last}")]
    Unparseable { attempts: usize, last: ParseError },
    #[error(transparent)]
    Backend(#[from] crate::llm::LlmError),
    #[error(transparent)]
    Prompt(#[from] MissingSlot),
}

/// Everything an encoder may look at for one step.
pub struct EncodeContext<'a> {
    pub observation: &'a Observation,
    pub spec: &'a TaskSpec,
    /// Ground truth, read only by the oracle.
    pub full_state: &'a FullState,
}

pub trait StateEncoder: Send {
    fn encode(&mut self, ctx: &EncodeContext<'_>) -> Result<StateKey, EncodeError>;

    /// Drains logged prompt/reply transcripts, if the backend keeps any.
    fn take_transcripts(&mut self) -> Vec<EncoderTranscript> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleEncoder;

impl StateEncoder for OracleEncoder {
    fn encode(&mut self, ctx: &EncodeContext<'_>) -> Result<StateKey, EncodeError> {
        Ok(oracle_encode(ctx.full_state, ctx.spec))
    }
}

/// One encoder exchange, logged as a JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTranscript {
    pub prompt: String,
    pub replies: Vec<String>,
    pub key: Option<CanonicalKey>,
    pub error: Option<String>,
}

pub struct LlmEncoder {
    client: Arc<LlmClient>,
    transcripts: Vec<EncoderTranscript>,
}

impl LlmEncoder {
    pub fn new(client: Arc<LlmClient>) -> Self {
        Self {
            client,
            transcripts: Vec::new(),
        }
    }

    /// Encodes from the observation text alone.
    pub fn encode_observation(
        &mut self,
        task: TaskKind,
        observation: &Observation,
    ) -> Result<StateKey, EncodeError> {
        let prompt = build_encoder_prompt(&EncoderInput::new(task, observation))?;
        let mut messages = vec![ChatMessage::user(prompt.clone())];
        let mut replies = Vec::new();
        let mut last_err = None;
        for _ in 0..=MAX_REPROMPTS {
            let reply = match self.client.prompt(messages.clone()) {
                Ok(r) => r,
                Err(e) => {
                    self.transcripts.push(EncoderTranscript {
                        prompt,
                        replies,
                        key: None,
                        error: Some(e.to_string()),
                    });
                    return Err(e.into());
                }
            };
            replies.push(reply.clone());
            match parse_encoder_output(&reply) {
                Ok(key) => {
                    self.transcripts.push(EncoderTranscript {
                        prompt,
                        replies,
                        key: Some(key.canonical()),
                        error: None,
                    });
                    return Ok(key);
                }
                Err(e) => {
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(format!(
                        "Your reply could not be parsed ({e}). Answer again, ending with the seven lines of the OUTPUT FORMAT exactly."
                    )));
                    last_err = Some(e);
                }
            }
        }
        let last = last_err.expect("at least one attempt");
        self.transcripts.push(EncoderTranscript {
            prompt,
            replies,
            key: None,
            error: Some(last.to_string()),
        });
        Err(EncodeError::Unparseable {
            attempts: MAX_REPROMPTS + 1,
            last,
        })
    }
}

impl StateEncoder for LlmEncoder {
    fn encode(&mut self, ctx: &EncodeContext<'_>) -> Result<StateKey, EncodeError> {
        self.encode_observation(ctx.spec.task, ctx.observation)
    }

    fn take_transcripts(&mut self) -> Vec<EncoderTranscript> {
        std::mem::take(&mut self.transcripts)
    }
}
