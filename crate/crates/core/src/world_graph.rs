//! Per-episode working memory: rooms, door edges between them, and the
//! objects seen in each room.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{visible_cells, Action, Color, DoorState, FullState, Item, Observation, Tile};
use crate::llm::{ChatMessage, LlmClient, LlmError};
use crate::prompts;

/// Room label, "room A", "room B", ..., "room Z", "room AA", ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct RoomId(pub u32);

impl RoomId {
    pub fn letters(self) -> String {
        let mut n = self.0 as u64 + 1;
        let mut out = Vec::new();
        while n > 0 {
            let rem = ((n - 1) % 26) as u8;
            out.push((b'A' + rem) as char);
            n = (n - 1) / 26;
        }
        out.iter().rev().collect()
    }
}

impl fmt::Display for RoomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "room {}", self.letters())
    }
}

impl FromStr for RoomId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let rest = t
            .get(..5)
            .filter(|p| p.eq_ignore_ascii_case("room "))
            .map(|_| t[5..].trim())
            .ok_or_else(|| format!("not a room label: `{s}`"))?;
        if rest.is_empty() || !rest.chars().all(|c| c.is_ascii_alphabetic()) || rest.len() > 6 {
            return Err(format!("not a room label: `{s}`"));
        }
        let mut n: u64 = 0;
        for c in rest.to_ascii_uppercase().bytes() {
            n = n * 26 + u64::from(c - b'A' + 1);
        }
        Ok(RoomId((n - 1) as u32))
    }
}

impl From<RoomId> for String {
    fn from(r: RoomId) -> Self {
        r.to_string()
    }
}

impl TryFrom<String> for RoomId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Door descriptor carried by an edge. The state is refreshable metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DoorRelation {
    pub color: Color,
    pub state: DoorState,
}

impl fmt::Display for DoorRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} door", self.color, self.state.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeTriplet {
    pub subject: RoomId,
    pub relation: DoorRelation,
    pub object: RoomId,
}

impl EdgeTriplet {
    /// Identity ignoring door state.
    pub fn identity(&self) -> (RoomId, Color, RoomId) {
        (self.subject, self.relation.color, self.object)
    }
}

impl fmt::Display for EdgeTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {}, {}", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldGraph {
    pub nodes: BTreeSet<RoomId>,
    /// Insertion order is preserved.
    pub edges: Vec<EdgeTriplet>,
    pub features: BTreeMap<RoomId, BTreeSet<Item>>,
    pub current_room: RoomId,
}

impl Default for WorldGraph {
    fn default() -> Self {
        Self::init()
    }
}

impl WorldGraph {
    pub fn init() -> Self {
        Self {
            nodes: BTreeSet::from([RoomId(0)]),
            edges: Vec::new(),
            features: BTreeMap::new(),
            current_room: RoomId(0),
        }
    }

    pub fn features_of(&self, room: RoomId) -> impl Iterator<Item = &Item> {
        self.features.get(&room).into_iter().flatten()
    }

    pub fn edge(&self, subject: RoomId, color: Color, object: RoomId) -> Option<&EdgeTriplet> {
        self.edges
            .iter()
            .find(|e| e.identity() == (subject, color, object))
    }

    /// Inserts the edge or refreshes its door state. Self-loops are ignored.
    pub fn upsert_edge(&mut self, edge: EdgeTriplet) -> bool {
        if edge.subject == edge.object {
            return false;
        }
        self.nodes.insert(edge.subject);
        self.nodes.insert(edge.object);
        match self.edges.iter_mut().find(|e| e.identity() == edge.identity()) {
            Some(e) => {
                e.relation.state = edge.relation.state;
                false
            }
            None => {
                self.edges.push(edge);
                true
            }
        }
    }

    pub fn add_feature(&mut self, room: RoomId, item: Item) -> bool {
        self.nodes.insert(room);
        self.features.entry(room).or_default().insert(item)
    }

    /// Next unused label in discovery order.
    pub fn next_label(&self) -> RoomId {
        self.nodes.iter().next_back().map_or(RoomId(0), |r| RoomId(r.0 + 1))
    }

    /// Text form placed into the `{world model}` prompt slots.
    pub fn serialize(&self) -> String {
        let mut lines = vec![format!("Current Room: {}", self.current_room)];
        for room in &self.nodes {
            let items: Vec<String> = self.features_of(*room).map(feature_text).collect();
            lines.push(format!("{room} [{}]", items.join(", ")));
        }
        lines.extend(self.edges.iter().map(ToString::to_string));
        lines.join("\n")
    }

    /// Elements of `prior` missing from `self`.
    pub fn missing_from(&self, prior: &WorldGraph) -> Vec<RetainAllViolation> {
        let mut out = Vec::new();
        for n in &prior.nodes {
            if !self.nodes.contains(n) {
                out.push(RetainAllViolation::Node(*n));
            }
        }
        for e in &prior.edges {
            if self.edge(e.subject, e.relation.color, e.object).is_none() {
                out.push(RetainAllViolation::Edge(*e));
            }
        }
        for (room, items) in &prior.features {
            for item in items {
                if !self.features.get(room).is_some_and(|s| s.contains(item)) {
                    out.push(RetainAllViolation::Feature(*room, *item));
                }
            }
        }
        out
    }

    /// Whether `self` retains everything in `prior`, door states aside.
    pub fn is_superset_of(&self, prior: &WorldGraph) -> bool {
        self.missing_from(prior).is_empty()
    }

    pub fn check_integrity(&self) -> Result<(), String> {
        if !self.nodes.contains(&self.current_room) {
            return Err(format!("current room {} is not a node", self.current_room));
        }
        for e in &self.edges {
            if e.subject == e.object {
                return Err(format!("self loop: {e}"));
            }
            if !self.nodes.contains(&e.subject) || !self.nodes.contains(&e.object) {
                return Err(format!("dangling edge: {e}"));
            }
        }
        if let Some(r) = self.features.keys().find(|r| !self.nodes.contains(r)) {
            return Err(format!("features for unknown {r}"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("graph serializes")
    }
}

/// Features drop door state: "yellow door".
fn feature_text(item: &Item) -> String {
    item.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetainAllViolation {
    Node(RoomId),
    Edge(EdgeTriplet),
    Feature(RoomId, Item),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("graph parse error at `{line}`: {message}")]
pub struct GraphParseError {
    pub line: String,
    pub message: String,
}

fn perr(line: &str, message: impl Into<String>) -> GraphParseError {
    GraphParseError {
        line: line.to_string(),
        message: message.into(),
    }
}

fn clean_line(raw: &str) -> String {
    let mut s = raw.trim();
    for prefix in ["- ", "* ", "• "] {
        if let Some(rest) = s.strip_prefix(prefix) {
            s = rest.trim_start();
        }
    }
    s.replace("**", "").replace('`', "").trim().trim_matches('"').trim().to_string()
}

fn parse_item(text: &str, line: &str) -> Result<Item, GraphParseError> {
    let lower = text.trim().to_ascii_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    // "yellow locked door" and "yellow door" both name the door feature.
    let joined = match words.as_slice() {
        [color, "door"] => format!("{color} door"),
        _ => words.join(" "),
    };
    joined
        .parse::<Item>()
        .map_err(|e| perr(line, format!("bad item `{text}`: {e}")))
}

fn parse_relation(text: &str, line: &str) -> Result<DoorRelation, GraphParseError> {
    let lower = text.trim().to_ascii_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    match words.as_slice() {
        [color, state, "door"] => Ok(DoorRelation {
            color: color.parse().map_err(|e: String| perr(line, e))?,
            state: state.parse().map_err(|e: String| perr(line, e))?,
        }),
        _ => Err(perr(line, format!("relation `{text}` is not `<color> <state> door`"))),
    }
}

/// Parses graph text without comparing it to anything.
///
/// Lines that are neither the current-room line, a room line nor a triplet
/// are skipped, so surrounding chatter is tolerated.
pub fn parse_graph_text(text: &str) -> Result<WorldGraph, GraphParseError> {
    let mut current = None;
    let mut graph = WorldGraph {
        nodes: BTreeSet::new(),
        edges: Vec::new(),
        features: BTreeMap::new(),
        current_room: RoomId(0),
    };
    for raw in text.lines() {
        let line = clean_line(raw);
        if line.is_empty() {
            continue;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("current room:") {
            let room: RoomId = rest.trim().trim_end_matches('.').parse().map_err(|e: String| perr(&line, e))?;
            current = Some(room);
            graph.nodes.insert(room);
            continue;
        }
        if let (Some(open), true) = (line.find('['), line.trim_end().ends_with(']')) {
            let Ok(room) = line[..open].trim().trim_end_matches(':').parse::<RoomId>() else {
                continue;
            };
            graph.nodes.insert(room);
            let inner = &line[open + 1..line.trim_end().len() - 1];
            for part in inner.split(',') {
                if part.trim().is_empty() {
                    continue;
                }
                let item = parse_item(part, &line)?;
                graph.features.entry(room).or_default().insert(item);
            }
            continue;
        }
        let parts: Vec<&str> = line.trim_end_matches('.').split(',').collect();
        if parts.len() == 3 && parts[0].trim().to_ascii_lowercase().starts_with("room") {
            let subject: RoomId = parts[0].parse().map_err(|e: String| perr(&line, e))?;
            let object: RoomId = parts[2].parse().map_err(|e: String| perr(&line, e))?;
            let relation = parse_relation(parts[1], &line)?;
            if subject == object {
                return Err(perr(&line, "triplet subject and object are the same room"));
            }
            graph.upsert_edge(EdgeTriplet {
                subject,
                relation,
                object,
            });
        }
    }
    graph.current_room = current.ok_or_else(|| perr("<missing line `Current Room:`>", "no current room"))?;
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphUpdate {
    pub graph: WorldGraph,
    pub violations: Vec<RetainAllViolation>,
}

/// Parses a model reply and enforces retain-all against `prior`.
///
/// Anything the reply dropped is put back and reported; door states on
/// surviving edges take the reply's value.
pub fn parse_graph_output(text: &str, prior: &WorldGraph) -> Result<GraphUpdate, GraphParseError> {
    let parsed = parse_graph_text(text)?;
    let violations = parsed.missing_from(prior);
    let mut graph = WorldGraph {
        nodes: prior.nodes.clone(),
        edges: prior.edges.clone(),
        features: prior.features.clone(),
        current_room: parsed.current_room,
    };
    graph.nodes.extend(parsed.nodes.iter().copied());
    for e in &parsed.edges {
        graph.upsert_edge(*e);
    }
    for (room, items) in &parsed.features {
        for item in items {
            graph.add_feature(*room, *item);
        }
    }
    for v in &violations {
        tracing::debug!(?v, "retain-all violation repaired");
    }
    Ok(GraphUpdate { graph, violations })
}

pub fn build_graph_prompt(graph: &WorldGraph, prev_obs: &str, action: Action, new_obs: &str) -> String {
    prompts::fill(
        prompts::GRAPH,
        &[
            ("world model", &graph.serialize()),
            ("previous observation", prev_obs),
            ("action", action.phrase()),
            ("new observation", new_obs),
            ("Format requirements", prompts::GRAPH_FORMAT.trim_end()),
        ],
    )
}

/// Maps simulator room indices to labels and applies ground-truth updates.
#[derive(Debug, Clone, Default)]
pub struct OracleGraphState {
    labels: HashMap<usize, RoomId>,
    last_room: Option<usize>,
}

impl OracleGraphState {
    pub fn new(initial: &FullState) -> Self {
        let mut s = Self::default();
        if let Some(r) = initial.room_of(initial.agent.pos) {
            s.labels.insert(r, RoomId(0));
            s.last_room = Some(r);
        }
        s
    }

    pub fn label_of(&self, room: usize) -> Option<RoomId> {
        self.labels.get(&room).copied()
    }

    /// Seeds the graph with what is visible in the initial state.
    pub fn observe_initial(&self, graph: &mut WorldGraph, state: &FullState) {
        add_visible_features(graph, state, &self.labels, self.last_room);
    }

    pub fn update(&mut self, graph: &WorldGraph, before: &FullState, _action: Action, after: &FullState) -> WorldGraph {
        let mut g = graph.clone();
        let here = after.room_of(after.agent.pos);
        if let (Some(to), Some(from)) = (here, self.last_room) {
            if to != from && after.agent.pos != before.agent.pos {
                let next = g.next_label();
                let to_label = *self.labels.entry(to).or_insert(next);
                let from_label = self.labels[&from];
                if let Tile::Door { color, state } = after.tile(before.agent.pos) {
                    g.upsert_edge(EdgeTriplet {
                        subject: from_label,
                        relation: DoorRelation { color, state },
                        object: to_label,
                    });
                }
                g.nodes.insert(to_label);
                g.current_room = to_label;
            }
        }
        if here.is_some() {
            self.last_room = here;
        }
        // Refresh door states of known edges for doors toggled in view.
        if let Tile::Door { color, state } = after.tile(after.front()) {
            for e in g.edges.iter_mut() {
                if e.relation.color == color && (e.subject == g.current_room || e.object == g.current_room) {
                    let door_pos = after.front();
                    if door_touches(after, door_pos, e, &self.labels) {
                        e.relation.state = state;
                    }
                }
            }
        }
        add_visible_features(&mut g, after, &self.labels, self.last_room);
        g
    }
}

fn door_touches(s: &FullState, door: crate::gridworld::Position, e: &EdgeTriplet, labels: &HashMap<usize, RoomId>) -> bool {
    let rooms: BTreeSet<RoomId> = [(0, -1), (1, 0), (0, 1), (-1, 0)]
        .iter()
        .filter_map(|&(dx, dy)| s.room_of(door.offset(dx, dy)))
        .filter_map(|r| labels.get(&r).copied())
        .collect();
    rooms.contains(&e.subject) && rooms.contains(&e.object)
}

fn add_visible_features(g: &mut WorldGraph, s: &FullState, labels: &HashMap<usize, RoomId>, room: Option<usize>) {
    let Some(room) = room else { return };
    let Some(label) = labels.get(&room).copied() else { return };
    for (_, p) in visible_cells(s) {
        let tile = s.tile(p);
        let here = match tile {
            Tile::Object { .. } => s.room_of(p) == Some(room),
            Tile::Door { .. } => [(0, -1), (1, 0), (0, 1), (-1, 0)]
                .iter()
                .any(|&(dx, dy)| s.room_of(p.offset(dx, dy)) == Some(room)),
            _ => false,
        };
        if here {
            if let Some(item) = tile.item() {
                g.add_feature(label, item);
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Parse(#[from] GraphParseError),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

/// One environment transition as seen by a graph updater.
pub struct GraphStep<'a> {
    pub prev_obs: &'a Observation,
    pub action: Action,
    pub new_obs: &'a Observation,
    pub before: &'a FullState,
    pub after: &'a FullState,
}

pub trait GraphUpdater: Send {
    fn reset(&mut self, graph: &mut WorldGraph, initial: &FullState);
    fn update(&mut self, graph: &WorldGraph, step: &GraphStep<'_>) -> Result<GraphUpdate, GraphError>;
}

#[derive(Debug, Default)]
pub struct OracleGraphUpdater {
    state: OracleGraphState,
}

impl GraphUpdater for OracleGraphUpdater {
    fn reset(&mut self, graph: &mut WorldGraph, initial: &FullState) {
        self.state = OracleGraphState::new(initial);
        *graph = WorldGraph::init();
        self.state.observe_initial(graph, initial);
    }

    fn update(&mut self, graph: &WorldGraph, step: &GraphStep<'_>) -> Result<GraphUpdate, GraphError> {
        Ok(GraphUpdate {
            graph: self.state.update(graph, step.before, step.action, step.after),
            violations: Vec::new(),
        })
    }
}

pub struct LlmGraphUpdater {
    client: Arc<LlmClient>,
}

impl LlmGraphUpdater {
    pub fn new(client: Arc<LlmClient>) -> Self {
        Self { client }
    }
}

impl GraphUpdater for LlmGraphUpdater {
    fn reset(&mut self, graph: &mut WorldGraph, _initial: &FullState) {
        *graph = WorldGraph::init();
    }

    fn update(&mut self, graph: &WorldGraph, step: &GraphStep<'_>) -> Result<GraphUpdate, GraphError> {
        let prompt = build_graph_prompt(graph, &step.prev_obs.to_text(), step.action, &step.new_obs.to_text());
        let reply = self.client.prompt(vec![ChatMessage::user(prompt)])?;
        Ok(parse_graph_output(&reply, graph)?)
    }
}
