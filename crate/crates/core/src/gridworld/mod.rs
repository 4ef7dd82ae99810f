//! Seeded text gridworld with BabyAI-style task semantics.
//!
//! The environment owns a [`FullState`] (ground truth) and renders an
//! egocentric [`Observation`] from it. Only the observation is meant for
//! language-model prompts; the full state feeds the oracle components.

mod layout;
pub mod planner;
pub mod view;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layout::{held_out_pairs, object_pairs, LayoutError};
pub use view::{render, visible_cells, DirectionPhrase, EgoOffset, VIEW_DEPTH, VIEW_HALF_WIDTH};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called after the episode finished")]
    EpisodeDone,
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub x: i32,
    pub y: i32,
}

impl Position {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Self::North, Self::East, Self::South, Self::West];

    /// Unit vector with y growing downwards.
    pub fn vector(self) -> (i32, i32) {
        match self {
            Self::North => (0, -1),
            Self::East => (1, 0),
            Self::South => (0, 1),
            Self::West => (-1, 0),
        }
    }

    pub fn left(self) -> Self {
        match self {
            Self::North => Self::West,
            Self::West => Self::South,
            Self::South => Self::East,
            Self::East => Self::North,
        }
    }

    pub fn right(self) -> Self {
        match self {
            Self::North => Self::East,
            Self::East => Self::South,
            Self::South => Self::West,
            Self::West => Self::North,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Purple,
    Yellow,
    Grey,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Self::Red,
        Self::Green,
        Self::Blue,
        Self::Purple,
        Self::Yellow,
        Self::Grey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Purple => "purple",
            Self::Yellow => "yellow",
            Self::Grey => "grey",
        }
    }
}

impl FromStr for Color {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown color `{s}`"))
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Key,
    Ball,
    Box,
    Door,
    Wall,
}

impl EntityKind {
    pub const ALL: [EntityKind; 5] = [Self::Key, Self::Ball, Self::Box, Self::Door, Self::Wall];
    /// Kinds that can be carried.
    pub const CARRYABLE: [EntityKind; 3] = [Self::Key, Self::Ball, Self::Box];

    pub fn name(self) -> &'static str {
        match self {
            Self::Key => "key",
            Self::Ball => "ball",
            Self::Box => "box",
            Self::Door => "door",
            Self::Wall => "wall",
        }
    }

    pub fn is_carryable(self) -> bool {
        matches!(self, Self::Key | Self::Ball | Self::Box)
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown entity kind `{s}`"))
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoorState {
    Open,
    Closed,
    Locked,
}

impl DoorState {
    pub const ALL: [DoorState; 3] = [Self::Open, Self::Closed, Self::Locked];

    pub fn name(self) -> &'static str {
        match self {
            Self::Open => "open",
            Self::Closed => "closed",
            Self::Locked => "locked",
        }
    }
}

impl FromStr for DoorState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown door state `{s}`"))
    }
}

/// A (color, kind) pair: task targets, carried items, room features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Item {
    pub color: Color,
    pub kind: EntityKind,
}

impl Item {
    pub const fn new(color: Color, kind: EntityKind) -> Self {
        Self { color, kind }
    }
}

impl fmt::Display for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color, self.kind)
    }
}

impl FromStr for Item {
    type Err = String;

    /// Accepts "red ball" and door descriptors such as "yellow locked door".
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let words: Vec<&str> = s.split_whitespace().collect();
        match words.as_slice() {
            [color, kind] => Ok(Item::new(color.parse()?, kind.parse()?)),
            [color, state, "door"] => {
                state.parse::<DoorState>()?;
                Ok(Item::new(color.parse()?, EntityKind::Door))
            }
            _ => Err(format!("cannot parse item `{s}`")),
        }
    }
}

/// The six agent actions. Declaration order is the tie-breaking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    TurnLeft,
    TurnRight,
    GoForward,
    PickUp,
    Drop,
    Toggle,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Self::TurnLeft,
        Self::TurnRight,
        Self::GoForward,
        Self::PickUp,
        Self::Drop,
        Self::Toggle,
    ];

    /// Natural-language name used in prompts.
    pub fn phrase(self) -> &'static str {
        match self {
            Self::TurnLeft => "turn left",
            Self::TurnRight => "turn right",
            Self::GoForward => "go forward",
            Self::PickUp => "pick up",
            Self::Drop => "drop",
            Self::Toggle => "toggle",
        }
    }

    pub fn ident(self) -> &'static str {
        match self {
            Self::TurnLeft => "turn_left",
            Self::TurnRight => "turn_right",
            Self::GoForward => "go_forward",
            Self::PickUp => "pick_up",
            Self::Drop => "drop",
            Self::Toggle => "toggle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.ident())
    }
}

impl FromStr for Action {
    type Err = String;

    /// Accepts both `go_forward` and `go forward`, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', '-'], " ");
        Self::ALL
            .into_iter()
            .find(|a| a.phrase() == norm)
            .ok_or_else(|| format!("unknown action `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    GoToLocal,
    PickupLocal,
    UnlockLocal,
    FindObj,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        Self::GoToLocal,
        Self::PickupLocal,
        Self::UnlockLocal,
        Self::FindObj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GoToLocal => "GoToLocal",
            Self::PickupLocal => "PickupLocal",
            Self::UnlockLocal => "UnlockLocal",
            Self::FindObj => "FindObj",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase().replace(['_', '-'], "");
        Self::ALL
            .into_iter()
            .find(|t| t.name().to_ascii_lowercase() == lower)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

/// Which (color, kind) pairs may appear as targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Held-out pairs never appear anywhere in the layout.
    #[default]
    NoChange,
    /// The target is drawn from the held-out pairs.
    NewObject,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "no_change" | "nochange" => Ok(Self::NoChange),
            "new_object" | "newobject" => Ok(Self::NewObject),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NoChange => "no_change",
            Self::NewObject => "new_object",
        })
    }
}

pub const HELD_OUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Fixed target; sampled from the split's pool when `None`.
    pub target: Option<Item>,
    pub rooms: usize,
    pub distractors: usize,
    pub max_steps: u32,
    pub split: Split,
    pub held_out_fraction: f64,
}

impl TaskSpec {
    pub fn new(task: TaskKind) -> Self {
        let (rooms, distractors, max_steps) = match task {
            TaskKind::GoToLocal | TaskKind::PickupLocal => (1, 8, 64),
            TaskKind::UnlockLocal => (2, 0, 64),
            TaskKind::FindObj => (6, 6, 320),
        };
        Self {
            task,
            target: None,
            rooms,
            distractors,
            max_steps,
            split: Split::NoChange,
            held_out_fraction: HELD_OUT_FRACTION,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_target(mut self, target: Item) -> Self {
        self.target = Some(target);
        self
    }

    pub fn with_max_steps(mut self, max_steps: u32) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        let bad = |msg: &str| Err(LayoutError::InvalidSpec(msg.to_string()));
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return bad("held_out_fraction must lie in [0, 1)");
        }
        match self.task {
            TaskKind::GoToLocal | TaskKind::PickupLocal => {
                if self.rooms != 1 || self.distractors != 8 {
                    return bad("single-room tasks use one room and eight distractors");
                }
            }
            TaskKind::UnlockLocal => {
                if self.rooms != 2 {
                    return bad("UnlockLocal uses two rooms");
                }
            }
            TaskKind::FindObj => {
                if self.rooms != 6 {
                    return bad("FindObj spans six rooms");
                }
            }
        }
        if let Some(target) = self.target {
            let door_task = self.task == TaskKind::UnlockLocal;
            if door_task != (target.kind == EntityKind::Door) || target.kind == EntityKind::Wall {
                return bad("target kind does not fit the task");
            }
        }
        Ok(())
    }

    pub fn mission(&self, target: Item) -> String {
        match self.task {
            TaskKind::GoToLocal => format!("go to the {target}"),
            TaskKind::PickupLocal | TaskKind::FindObj => format!("pick up the {target}"),
            TaskKind::UnlockLocal => format!("open the {target}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Tile {
    Floor,
    Wall,
    Door { color: Color, state: DoorState },
    Object { color: Color, kind: EntityKind },
}

impl Tile {
    pub fn object(item: Item) -> Self {
        debug_assert!(item.kind.is_carryable());
        Tile::Object {
            color: item.color,
            kind: item.kind,
        }
    }

    /// Blocks line of sight.
    pub fn is_opaque(self) -> bool {
        match self {
            Tile::Wall => true,
            Tile::Door { state, .. } => state != DoorState::Open,
            _ => false,
        }
    }

    pub fn is_passable(self) -> bool {
        matches!(
            self,
            Tile::Floor
                | Tile::Door {
                    state: DoorState::Open,
                    ..
                }
        )
    }

    pub fn item(self) -> Option<Item> {
        match self {
            Tile::Door { color, .. } => Some(Item::new(color, EntityKind::Door)),
            Tile::Object { color, kind } => Some(Item::new(color, kind)),
            _ => None,
        }
    }

    /// Noun phrase used in observations, e.g. "red ball" or "yellow locked door".
    pub fn describe(self) -> Option<String> {
        match self {
            Tile::Floor => None,
            Tile::Wall => Some("wall".to_string()),
            Tile::Door { color, state } => Some(format!("{color} {} door", state.name())),
            Tile::Object { color, kind } => Some(format!("{color} {kind}")),
        }
    }
}

/// Axis-aligned room interior, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub min: Position,
    pub max: Position,
}

impl Room {
    pub fn contains(&self, p: Position) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn cells(&self) -> impl Iterator<Item = Position> + '_ {
        (self.min.y..=self.max.y)
            .flat_map(move |y| (self.min.x..=self.max.x).map(move |x| Position::new(x, y)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub pos: Position,
    pub dir: Direction,
}

/// Complete internal state. Never rendered into prompts directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub task: TaskKind,
    pub target: Item,
    pub mission: String,
    pub width: i32,
    pub height: i32,
    pub tiles: Vec<Tile>,
    pub rooms: Vec<Room>,
    pub agent: Pose,
    pub carrying: Option<Item>,
    pub step_count: u32,
    pub max_steps: u32,
    pub done: bool,
    pub success: bool,
}

impl FullState {
    pub fn in_bounds(&self, p: Position) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.width && p.y < self.height
    }

    /// Out-of-bounds positions read as walls.
    pub fn tile(&self, p: Position) -> Tile {
        if self.in_bounds(p) {
            self.tiles[(p.y * self.width + p.x) as usize]
        } else {
            Tile::Wall
        }
    }

    pub fn set_tile(&mut self, p: Position, tile: Tile) {
        assert!(self.in_bounds(p), "position {p:?} out of bounds");
        let idx = (p.y * self.width + p.x) as usize;
        self.tiles[idx] = tile;
    }

    pub fn front(&self) -> Position {
        let (dx, dy) = self.agent.dir.vector();
        self.agent.pos.offset(dx, dy)
    }

    pub fn room_of(&self, p: Position) -> Option<usize> {
        self.rooms.iter().position(|r| r.contains(p))
    }

    /// Items lying in each room (doors excluded).
    pub fn room_inventory(&self) -> Vec<Vec<Item>> {
        self.rooms
            .iter()
            .map(|room| {
                room.cells()
                    .filter_map(|p| match self.tile(p) {
                        Tile::Object { color, kind } => Some(Item::new(color, kind)),
                        _ => None,
                    })
                    .collect()
            })
            .collect()
    }

    /// Every (color, kind) entity on the grid or in hand, walls excluded.
    pub fn entity_multiset(&self) -> Vec<Item> {
        let mut items: Vec<Item> = self
            .tiles
            .iter()
            .filter_map(|t| match t {
                Tile::Object { color, kind } => Some(Item::new(*color, *kind)),
                _ => None,
            })
            .chain(self.carrying)
            .collect();
        items.sort();
        items
    }

    pub fn doors(&self) -> impl Iterator<Item = (Position, Color, DoorState)> + '_ {
        self.tiles.iter().enumerate().filter_map(move |(i, t)| match t {
            Tile::Door { color, state } => Some((
                Position::new(i as i32 % self.width, i as i32 / self.width),
                *color,
                *state,
            )),
            _ => None,
        })
    }

    fn check_success(&self) -> bool {
        let target = self.target;
        match self.task {
            TaskKind::GoToLocal => self.tile(self.front()).item() == Some(target),
            TaskKind::PickupLocal | TaskKind::FindObj => self.carrying == Some(target),
            TaskKind::UnlockLocal => self.doors().any(|(_, color, state)| {
                color == target.color && state == DoorState::Open
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub mission: String,
    pub view_lines: Vec<String>,
    pub carrying: Option<Item>,
}

impl Observation {
    /// Text placed into prompt observation slots.
    pub fn to_text(&self) -> String {
        let mut lines = self.view_lines.clone();
        if let Some(item) = self.carrying {
            lines.push(format!("You carry a {item}"));
        }
        if lines.is_empty() {
            return "You see nothing of note".to_string();
        }
        lines.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Layout export for golden traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSnapshot {
    pub version: u32,
    pub spec: TaskSpec,
    pub seed: u64,
    pub state: FullState,
}

pub const SNAPSHOT_VERSION: u32 = 1;

/// Room traversal recorded by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traversal {
    pub from_room: usize,
    pub door: Position,
    pub to_room: usize,
}

#[derive(Debug, Clone)]
pub struct Environment {
    spec: TaskSpec,
    seed: u64,
    initial: FullState,
    state: FullState,
    last_room: Option<usize>,
    visited_rooms: Vec<usize>,
    traversals: Vec<Traversal>,
}

impl Environment {
    pub fn new(spec: TaskSpec, seed: u64) -> Result<Self, EnvError> {
        spec.validate()?;
        let initial = layout::generate(&spec, seed)?;
        Ok(Self::from_state(spec, seed, initial))
    }

    fn from_state(spec: TaskSpec, seed: u64, initial: FullState) -> Self {
        let mut env = Self {
            spec,
            seed,
            state: initial.clone(),
            initial,
            last_room: None,
            visited_rooms: Vec::new(),
            traversals: Vec::new(),
        };
        env.reset();
        env
    }

    pub fn from_snapshot(snapshot: LayoutSnapshot) -> Result<Self, EnvError> {
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(EnvError::Snapshot(format!(
                "unsupported version {}",
                snapshot.version
            )));
        }
        let s = &snapshot.state;
        if s.tiles.len() != (s.width * s.height) as usize || !s.in_bounds(s.agent.pos) {
            return Err(EnvError::Snapshot("grid dimensions do not match".into()));
        }
        Ok(Self::from_state(snapshot.spec, snapshot.seed, snapshot.state))
    }

    pub fn snapshot(&self) -> LayoutSnapshot {
        LayoutSnapshot {
            version: SNAPSHOT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            state: self.initial.clone(),
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn target(&self) -> Item {
        self.initial.target
    }

    pub fn mission(&self) -> &str {
        &self.initial.mission
    }

    pub fn reset(&mut self) -> Observation {
        self.state = self.initial.clone();
        self.last_room = self.state.room_of(self.state.agent.pos);
        self.visited_rooms = self.last_room.into_iter().collect();
        self.traversals.clear();
        self.render_text()
    }

    pub fn render_text(&self) -> Observation {
        view::render(&self.state)
    }

    pub fn ground_truth(&self) -> &FullState {
        &self.state
    }

    /// Rooms in the order they were first entered.
    pub fn visited_rooms(&self) -> &[usize] {
        &self.visited_rooms
    }

    pub fn traversals(&self) -> &[Traversal] {
        &self.traversals
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.state.done {
            return Err(EnvError::EpisodeDone);
        }
        let prev_pos = self.state.agent.pos;
        apply_action(&mut self.state, action);
        let s = &mut self.state;
        s.step_count += 1;
        s.success = s.check_success();
        s.done = s.success || s.step_count >= s.max_steps;
        let reward = if s.success {
            1.0 - 0.9 * (f64::from(s.step_count) / f64::from(s.max_steps))
        } else {
            0.0
        };

        if s.agent.pos != prev_pos {
            if let Some(room) = s.room_of(s.agent.pos) {
                if let Some(from) = self.last_room.filter(|&r| r != room) {
                    self.traversals.push(Traversal {
                        from_room: from,
                        door: prev_pos,
                        to_room: room,
                    });
                }
                if !self.visited_rooms.contains(&room) {
                    self.visited_rooms.push(room);
                }
                self.last_room = Some(room);
            }
        }

        Ok(StepResult {
            observation: view::render(&self.state),
            reward,
            done: self.state.done,
            success: self.state.success,
        })
    }
}

/// Transition dynamics shared by the environment and the planner.
pub(crate) fn apply_action(s: &mut FullState, action: Action) {
    let front = s.front();
    let front_tile = s.tile(front);
    match action {
        Action::TurnLeft => s.agent.dir = s.agent.dir.left(),
        Action::TurnRight => s.agent.dir = s.agent.dir.right(),
        Action::GoForward => {
            if front_tile.is_passable() {
                s.agent.pos = front;
            }
        }
        Action::PickUp => {
            if let (None, Tile::Object { color, kind }) = (s.carrying, front_tile) {
                s.carrying = Some(Item::new(color, kind));
                s.set_tile(front, Tile::Floor);
            }
        }
        Action::Drop => {
            if let (Some(item), Tile::Floor) = (s.carrying, front_tile) {
                if s.in_bounds(front) {
                    s.set_tile(front, Tile::object(item));
                    s.carrying = None;
                }
            }
        }
        Action::Toggle => {
            if let Tile::Door { color, state } = front_tile {
                let next = match state {
                    DoorState::Locked => {
                        if s.carrying == Some(Item::new(color, EntityKind::Key)) {
                            DoorState::Open
                        } else {
                            DoorState::Locked
                        }
                    }
                    DoorState::Closed => DoorState::Open,
                    DoorState::Open => DoorState::Closed,
                };
                s.set_tile(front, Tile::Door { color, state: next });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor() -> FullState {
        // 5x3 grid: wall border, single row of floor cells.
        let (w, h) = (5, 3);
        let mut tiles = vec![Tile::Wall; (w * h) as usize];
        for x in 1..4 {
            tiles[(w + x) as usize] = Tile::Floor;
        }
        FullState {
            task: TaskKind::GoToLocal,
            target: Item::new(Color::Red, EntityKind::Ball),
            mission: "go to the red ball".into(),
            width: w,
            height: h,
            tiles,
            rooms: vec![Room {
                min: Position::new(1, 1),
                max: Position::new(3, 1),
            }],
            agent: Pose {
                pos: Position::new(1, 1),
                dir: Direction::North,
            },
            carrying: None,
            step_count: 0,
            max_steps: 10,
            done: false,
            success: false,
        }
    }

    #[test]
    fn turning_cycles_through_four_directions() {
        let mut d = Direction::North;
        for _ in 0..4 {
            d = d.left();
        }
        assert_eq!(d, Direction::North);
        assert_eq!(Direction::North.right(), Direction::East);
        assert_eq!(Direction::North.left(), Direction::West);
    }

    #[test]
    fn blocked_move_is_noop() {
        let mut s = corridor();
        apply_action(&mut s, Action::GoForward);
        assert_eq!(s.agent.pos, Position::new(1, 1));
    }

    #[test]
    fn locked_door_needs_matching_key() {
        let mut s = corridor();
        s.agent.dir = Direction::East;
        let door = Position::new(2, 1);
        s.set_tile(
            door,
            Tile::Door {
                color: Color::Red,
                state: DoorState::Locked,
            },
        );
        apply_action(&mut s, Action::Toggle);
        assert!(matches!(s.tile(door), Tile::Door { state: DoorState::Locked, .. }));
        s.carrying = Some(Item::new(Color::Blue, EntityKind::Key));
        apply_action(&mut s, Action::Toggle);
        assert!(matches!(s.tile(door), Tile::Door { state: DoorState::Locked, .. }));
        s.carrying = Some(Item::new(Color::Red, EntityKind::Key));
        apply_action(&mut s, Action::Toggle);
        assert!(matches!(s.tile(door), Tile::Door { state: DoorState::Open, .. }));
    }

    #[test]
    fn pickup_needs_empty_hands_and_drop_needs_floor() {
        let mut s = corridor();
        s.agent.dir = Direction::East;
        let front = Position::new(2, 1);
        s.set_tile(front, Tile::object(Item::new(Color::Red, EntityKind::Ball)));
        s.carrying = Some(Item::new(Color::Blue, EntityKind::Key));
        apply_action(&mut s, Action::PickUp);
        assert_eq!(s.carrying, Some(Item::new(Color::Blue, EntityKind::Key)));
        apply_action(&mut s, Action::Drop);
        assert_eq!(s.carrying, Some(Item::new(Color::Blue, EntityKind::Key)));

        s.carrying = None;
        apply_action(&mut s, Action::PickUp);
        assert_eq!(s.carrying, Some(Item::new(Color::Red, EntityKind::Ball)));
        assert_eq!(s.tile(front), Tile::Floor);
        apply_action(&mut s, Action::Drop);
        assert_eq!(s.carrying, None);
        assert_eq!(s.tile(front).item(), Some(Item::new(Color::Red, EntityKind::Ball)));
    }

    #[test]
    fn parse_names() {
        assert_eq!("go forward".parse::<Action>().unwrap(), Action::GoForward);
        assert_eq!("PICK_UP".parse::<Action>().unwrap(), Action::PickUp);
        assert_eq!("gotolocal".parse::<TaskKind>().unwrap(), TaskKind::GoToLocal);
        assert_eq!(
            "yellow locked door".parse::<Item>().unwrap(),
            Item::new(Color::Yellow, EntityKind::Door)
        );
        assert!("3 red balls".parse::<Item>().is_err());
    }

    #[test]
    fn action_order_is_fixed() {
        let mut sorted = Action::ALL;
        sorted.sort();
        assert_eq!(sorted, Action::ALL);
        assert!(Action::TurnLeft < Action::TurnRight);
    }
}
