//! Egocentric visibility and text rendering.
//!
//! The view is a 7x7 cone in front of the agent, agent at the bottom
//! center. A cell is visible when the segment between the agent's cell
//! center and the cell's center crosses no opaque cell interior (walls,
//! closed or locked doors). Passing exactly through a cell corner does not
//! count as crossing either neighbour.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{FullState, Observation, Pose, Position, Tile};

pub const VIEW_DEPTH: i32 = 7;
pub const VIEW_HALF_WIDTH: i32 = 3;

/// Offset in the agent frame: `lateral < 0` is left, `forward >= 0` ahead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EgoOffset {
    pub lateral: i32,
    pub forward: i32,
}

impl EgoOffset {
    pub const fn new(lateral: i32, forward: i32) -> Self {
        Self { lateral, forward }
    }

    pub fn in_view(self) -> bool {
        self.lateral.abs() <= VIEW_HALF_WIDTH
            && (0..VIEW_DEPTH).contains(&self.forward)
            && self != EgoOffset::new(0, 0)
    }

    pub fn to_world(self, pose: Pose) -> Position {
        let (fx, fy) = pose.dir.vector();
        let (rx, ry) = pose.dir.right().vector();
        pose.pos.offset(
            self.forward * fx + self.lateral * rx,
            self.forward * fy + self.lateral * ry,
        )
    }

    pub fn from_world(pose: Pose, p: Position) -> Self {
        let (fx, fy) = pose.dir.vector();
        let (rx, ry) = pose.dir.right().vector();
        let (dx, dy) = (p.x - pose.pos.x, p.y - pose.pos.y);
        Self::new(dx * rx + dy * ry, dx * fx + dy * fy)
    }

    /// Number-free direction phrase, `None` for the agent's own cell or
    /// cells behind it.
    pub fn phrase(self) -> Option<DirectionPhrase> {
        use DirectionPhrase::*;
        match (self.lateral.signum(), self.forward.signum()) {
            (0, 1) => Some(Forward),
            (-1, 0) => Some(Left),
            (1, 0) => Some(Right),
            (-1, 1) => Some(LeftAndForward),
            (1, 1) => Some(RightAndForward),
            _ => None,
        }
    }

    /// Distance wording, e.g. "1 step left and 3 steps forward".
    pub fn distance_text(self) -> String {
        fn steps(n: i32) -> String {
            if n == 1 {
                "1 step".to_string()
            } else {
                format!("{n} steps")
            }
        }
        let side = if self.lateral < 0 { "left" } else { "right" };
        match (self.lateral, self.forward) {
            (0, f) => format!("{} forward", steps(f)),
            (l, 0) => format!("{} {side}", steps(l.abs())),
            (l, f) => format!("{} {side} and {} forward", steps(l.abs()), steps(f)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DirectionPhrase {
    Forward,
    Left,
    Right,
    LeftAndForward,
    RightAndForward,
}

impl DirectionPhrase {
    pub const ALL: [DirectionPhrase; 5] = [
        Self::Forward,
        Self::Left,
        Self::Right,
        Self::LeftAndForward,
        Self::RightAndForward,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Left => "left",
            Self::Right => "right",
            Self::LeftAndForward => "left and forward",
            Self::RightAndForward => "right and forward",
        }
    }
}

impl fmt::Display for DirectionPhrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

impl FromStr for DirectionPhrase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.split_whitespace().collect::<Vec<_>>().join(" ").to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|p| p.text() == norm)
            .ok_or_else(|| format!("not a direction phrase: `{s}`"))
    }
}

/// View offsets in scan order: nearest row first, left to right.
pub fn view_offsets() -> impl Iterator<Item = EgoOffset> {
    (0..VIEW_DEPTH).flat_map(|f| {
        (-VIEW_HALF_WIDTH..=VIEW_HALF_WIDTH)
            .map(move |l| EgoOffset::new(l, f))
            .filter(|o| o.in_view())
    })
}

/// Walks the cells crossed by the segment from the origin to `target`,
/// excluding both endpoints.
pub(crate) fn cells_between(target: EgoOffset) -> Vec<EgoOffset> {
    let (dx, dy) = (target.lateral.abs(), target.forward.abs());
    let (sx, sy) = (target.lateral.signum(), target.forward.signum());
    let (mut ix, mut iy) = (0, 0);
    let (mut x, mut y) = (0, 0);
    let mut out = Vec::new();
    while ix < dx || iy < dy {
        // Compare the parameters at which the next vertical and horizontal
        // cell boundaries are crossed.
        let decision = (1 + 2 * ix) * dy - (1 + 2 * iy) * dx;
        if decision == 0 {
            x += sx;
            y += sy;
            ix += 1;
            iy += 1;
        } else if decision < 0 {
            x += sx;
            ix += 1;
        } else {
            y += sy;
            iy += 1;
        }
        if (x, y) == (target.lateral, target.forward) {
            break;
        }
        out.push(EgoOffset::new(x, y));
    }
    out
}

fn line_of_sight(state: &FullState, offset: EgoOffset) -> bool {
    cells_between(offset)
        .into_iter()
        .all(|c| !state.tile(c.to_world(state.agent)).is_opaque())
}

/// Visible in-bounds cells of the view cone with their world positions.
pub fn visible_cells(state: &FullState) -> Vec<(EgoOffset, Position)> {
    view_offsets()
        .filter_map(|o| {
            let p = o.to_world(state.agent);
            (state.in_bounds(p) && line_of_sight(state, o)).then_some((o, p))
        })
        .collect()
}

/// First opaque cell along a straight line, if it is a wall.
fn nearest_wall(state: &FullState, step: (i32, i32), max: i32) -> Option<EgoOffset> {
    (1..=max)
        .map(|k| EgoOffset::new(step.0 * k, step.1 * k))
        .find(|o| state.tile(o.to_world(state.agent)).is_opaque())
        .filter(|o| state.tile(o.to_world(state.agent)) == Tile::Wall)
}

pub(crate) fn reported_walls(state: &FullState) -> [Option<EgoOffset>; 3] {
    [
        nearest_wall(state, (0, 1), VIEW_DEPTH - 1),
        nearest_wall(state, (-1, 0), VIEW_HALF_WIDTH),
        nearest_wall(state, (1, 0), VIEW_HALF_WIDTH),
    ]
}

/// Renders the egocentric observation.
///
/// Objects and doors in visible cells produce one sentence each. Walls are
/// only reported for the nearest wall straight ahead, straight left and
/// straight right.
pub fn render(state: &FullState) -> Observation {
    let walls = reported_walls(state);
    let view_lines = visible_cells(state)
        .into_iter()
        .filter_map(|(o, p)| {
            let tile = state.tile(p);
            let noun = match tile {
                Tile::Wall if walls.contains(&Some(o)) => "wall".to_string(),
                Tile::Wall | Tile::Floor => return None,
                _ => tile.describe()?,
            };
            Some(format!("You see a {noun} {}", o.distance_text()))
        })
        .collect();
    Observation {
        mission: state.mission.clone(),
        view_lines,
        carrying: state.carrying,
    }
}
