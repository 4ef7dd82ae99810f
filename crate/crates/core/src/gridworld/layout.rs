//! Seeded layout generation for the four tasks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::planner;
use super::{
    Color, Direction, DoorState, EntityKind, FullState, Item, Pose, Position, Room, Split,
    TaskKind, TaskSpec, Tile,
};

const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("layout generation failed after {attempts} attempts: {constraint}")]
    Exhausted { attempts: usize, constraint: String },
}

/// All carryable (color, kind) pairs, color-major.
pub fn object_pairs() -> Vec<Item> {
    Color::ALL
        .into_iter()
        .flat_map(|c| EntityKind::CARRYABLE.into_iter().map(move |k| Item::new(c, k)))
        .collect()
}

/// Pairs reserved for the new-object split.
///
/// Takes `round(fraction * 18)` pairs along a fixed stride-5 walk of
/// [`object_pairs`]; stride 5 is coprime with 18 so the walk visits every
/// pair once. With the default 0.2 this holds out red key, green box,
/// purple ball and grey key.
pub fn held_out_pairs(fraction: f64) -> Vec<Item> {
    let pairs = object_pairs();
    let n = (fraction * pairs.len() as f64).round() as usize;
    let mut out: Vec<Item> = (0..n).map(|i| pairs[(i * 5) % pairs.len()]).collect();
    out.sort();
    out
}

struct Pools {
    targets: Vec<Item>,
    allowed: Vec<Item>,
}

fn pools(spec: &TaskSpec) -> Pools {
    let held = held_out_pairs(spec.held_out_fraction);
    let allowed: Vec<Item> = object_pairs()
        .into_iter()
        .filter(|p| !held.contains(p))
        .collect();
    let targets = match spec.task {
        TaskKind::UnlockLocal => {
            let key_pool = match spec.split {
                Split::NoChange => &allowed,
                Split::NewObject => &held,
            };
            let mut colors: Vec<Color> = key_pool
                .iter()
                .filter(|p| p.kind == EntityKind::Key)
                .map(|p| p.color)
                .collect();
            colors.dedup();
            colors
                .into_iter()
                .map(|c| Item::new(c, EntityKind::Door))
                .collect()
        }
        _ => match spec.split {
            Split::NoChange => allowed.clone(),
            Split::NewObject => held,
        },
    };
    Pools { targets, allowed }
}

pub(crate) fn generate(spec: &TaskSpec, seed: u64) -> Result<FullState, LayoutError> {
    let pools = pools(spec);
    let target = match spec.target {
        Some(t) => t,
        None => {
            if pools.targets.is_empty() {
                return Err(LayoutError::InvalidSpec(format!(
                    "no target pairs available for split {}",
                    spec.split
                )));
            }
            // Target choice uses its own stream so retries do not change it.
            let mut trng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a72_6765_7420_6964);
            *pools.targets.choose(&mut trng).expect("non-empty")
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_failure = String::new();
    for _ in 0..MAX_ATTEMPTS {
        let attempt = match spec.task {
            TaskKind::GoToLocal | TaskKind::PickupLocal => single_room(spec, target, &pools, &mut rng),
            TaskKind::UnlockLocal => unlock(spec, target, &pools, &mut rng),
            TaskKind::FindObj => find_obj(spec, target, &pools, &mut rng),
        };
        match attempt.and_then(|s| verify(spec, s)) {
            Ok(state) => return Ok(state),
            Err(why) => last_failure = why,
        }
    }
    Err(LayoutError::Exhausted {
        attempts: MAX_ATTEMPTS,
        constraint: last_failure,
    })
}

fn verify(spec: &TaskSpec, state: FullState) -> Result<FullState, String> {
    if state.check_success() {
        return Err("layout is solved at the start pose".into());
    }
    let solvable = match spec.task {
        TaskKind::FindObj => planner::target_reachable(&state),
        _ => planner::shortest_plan(&state, planner::DEFAULT_EXPANSION_LIMIT).is_some(),
    };
    if solvable {
        Ok(state)
    } else {
        Err("no solution found by the planner".into())
    }
}

fn blank(
    spec: &TaskSpec,
    target: Item,
    width: i32,
    height: i32,
    rooms: Vec<Room>,
) -> FullState {
    let mut state = FullState {
        task: spec.task,
        target,
        mission: spec.mission(target),
        width,
        height,
        tiles: vec![Tile::Wall; (width * height) as usize],
        rooms,
        agent: Pose {
            pos: Position::new(0, 0),
            dir: Direction::North,
        },
        carrying: None,
        step_count: 0,
        max_steps: spec.max_steps,
        done: false,
        success: false,
    };
    for room in state.rooms.clone() {
        for p in room.cells() {
            state.set_tile(p, Tile::Floor);
        }
    }
    state
}

fn free_cell(
    state: &FullState,
    room: &Room,
    avoid: &[Position],
    rng: &mut ChaCha8Rng,
) -> Option<Position> {
    let cells: Vec<Position> = room
        .cells()
        .filter(|p| state.tile(*p) == Tile::Floor && !avoid.contains(p))
        .collect();
    cells.choose(rng).copied()
}

fn place(
    state: &mut FullState,
    room: &Room,
    item: Item,
    avoid: &[Position],
    rng: &mut ChaCha8Rng,
) -> Result<Position, String> {
    let p = free_cell(state, room, avoid, rng)
        .ok_or_else(|| format!("no free cell for {item}"))?;
    state.set_tile(p, Tile::object(item));
    Ok(p)
}

fn distractor(pools: &Pools, exclude: &[Item], rng: &mut ChaCha8Rng) -> Result<Item, String> {
    let options: Vec<Item> = pools
        .allowed
        .iter()
        .filter(|p| !exclude.contains(p))
        .copied()
        .collect();
    options
        .choose(rng)
        .copied()
        .ok_or_else(|| "empty distractor pool".to_string())
}

fn place_agent(
    state: &mut FullState,
    room: &Room,
    avoid: &[Position],
    rng: &mut ChaCha8Rng,
) -> Result<(), String> {
    let pos = free_cell(state, room, avoid, rng).ok_or("no free cell for the agent")?;
    let dir = Direction::ALL[rng.gen_range(0..4)];
    state.agent = Pose { pos, dir };
    Ok(())
}

fn single_room(
    spec: &TaskSpec,
    target: Item,
    pools: &Pools,
    rng: &mut ChaCha8Rng,
) -> Result<FullState, String> {
    let room = Room {
        min: Position::new(1, 1),
        max: Position::new(6, 6),
    };
    let mut state = blank(spec, target, 8, 8, vec![room]);
    place(&mut state, &room, target, &[], rng)?;
    for _ in 0..spec.distractors {
        let item = distractor(pools, &[target], rng)?;
        place(&mut state, &room, item, &[], rng)?;
    }
    place_agent(&mut state, &room, &[], rng)?;
    Ok(state)
}

fn unlock(
    spec: &TaskSpec,
    target: Item,
    pools: &Pools,
    rng: &mut ChaCha8Rng,
) -> Result<FullState, String> {
    let left = Room {
        min: Position::new(1, 1),
        max: Position::new(6, 6),
    };
    let right = Room {
        min: Position::new(8, 1),
        max: Position::new(13, 6),
    };
    let mut state = blank(spec, target, 15, 8, vec![left, right]);
    let door_y = rng.gen_range(1..=6);
    let door = Position::new(7, door_y);
    state.set_tile(
        door,
        Tile::Door {
            color: target.color,
            state: DoorState::Locked,
        },
    );
    let avoid = [Position::new(6, door_y), Position::new(8, door_y)];
    let key = Item::new(target.color, EntityKind::Key);
    place(&mut state, &left, key, &avoid, rng)?;
    for _ in 0..spec.distractors {
        let item = distractor(pools, &[key], rng)?;
        place(&mut state, &left, item, &avoid, rng)?;
    }
    place_agent(&mut state, &left, &avoid, rng)?;
    Ok(state)
}

/// Interior size of FindObj rooms.
const FIND_ROOM: i32 = 5;

fn find_obj(
    spec: &TaskSpec,
    target: Item,
    pools: &Pools,
    rng: &mut ChaCha8Rng,
) -> Result<FullState, String> {
    let (rows, cols) = (2, 3);
    let stride = FIND_ROOM + 1;
    let rooms: Vec<Room> = (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| Room {
                min: Position::new(1 + stride * c, 1 + stride * r),
                max: Position::new(FIND_ROOM + stride * c, FIND_ROOM + stride * r),
            })
        })
        .collect();
    let mut state = blank(spec, target, cols * stride + 1, rows * stride + 1, rooms.clone());

    let mut avoid = Vec::new();
    let mut add_door = |state: &mut FullState, p: Position, horizontal: bool, rng: &mut ChaCha8Rng| {
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        state.set_tile(
            p,
            Tile::Door {
                color,
                state: DoorState::Closed,
            },
        );
        if horizontal {
            avoid.extend([p.offset(-1, 0), p.offset(1, 0)]);
        } else {
            avoid.extend([p.offset(0, -1), p.offset(0, 1)]);
        }
    };
    for r in 0..rows {
        for c in 0..cols - 1 {
            let y = 1 + stride * r + rng.gen_range(0..FIND_ROOM);
            add_door(&mut state, Position::new(stride * (c + 1), y), true, rng);
        }
    }
    for c in 0..cols {
        let x = 1 + stride * c + rng.gen_range(0..FIND_ROOM);
        add_door(&mut state, Position::new(x, stride), false, rng);
    }

    let agent_room = rng.gen_range(0..rooms.len());
    let mut target_room = rng.gen_range(0..rooms.len() - 1);
    if target_room >= agent_room {
        target_room += 1;
    }
    place(&mut state, &rooms[target_room], target, &avoid, rng)?;
    for _ in 0..spec.distractors {
        let item = distractor(pools, &[target], rng)?;
        let room = rooms[rng.gen_range(0..rooms.len())];
        place(&mut state, &room, item, &avoid, rng)?;
    }
    place_agent(&mut state, &rooms[agent_room], &avoid, rng)?;
    Ok(state)
}
