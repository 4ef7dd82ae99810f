//! Breadth-first planning over ground-truth states.

use std::collections::{HashMap, HashSet, VecDeque};

use super::{apply_action, Action, DoorState, FullState, Pose, Position, Tile};

pub const DEFAULT_EXPANSION_LIMIT: usize = 200_000;

const PLAN_ACTIONS: [Action; 5] = [
    Action::TurnLeft,
    Action::TurnRight,
    Action::GoForward,
    Action::PickUp,
    Action::Toggle,
];

#[derive(Clone, PartialEq, Eq, Hash)]
struct Node {
    pose: Pose,
    carrying: Option<super::Item>,
    tiles: Vec<Tile>,
}

impl Node {
    fn of(s: &FullState) -> Self {
        Self {
            pose: s.agent,
            carrying: s.carrying,
            tiles: s.tiles.clone(),
        }
    }
}

/// Shortest action sequence reaching task success, ignoring the step budget.
///
/// Drop is excluded from the search; none of the tasks need it.
pub fn shortest_plan(start: &FullState, limit: usize) -> Option<Vec<Action>> {
    if start.check_success() {
        return Some(Vec::new());
    }
    let mut parents: HashMap<Node, Option<(Node, Action)>> = HashMap::new();
    let mut queue = VecDeque::new();
    let root = Node::of(start);
    parents.insert(root.clone(), None);
    queue.push_back(start.clone());
    while let Some(state) = queue.pop_front() {
        if parents.len() > limit {
            return None;
        }
        let node = Node::of(&state);
        for action in PLAN_ACTIONS {
            let mut next = state.clone();
            apply_action(&mut next, action);
            let key = Node::of(&next);
            if parents.contains_key(&key) {
                continue;
            }
            parents.insert(key.clone(), Some((node.clone(), action)));
            if next.check_success() {
                let mut plan = vec![action];
                let mut cur = node.clone();
                while let Some(Some((parent, a))) = parents.get(&cur) {
                    plan.push(*a);
                    cur = parent.clone();
                }
                plan.reverse();
                return Some(plan);
            }
            queue.push_back(next);
        }
    }
    None
}

/// Cells reachable from the agent, treating closed doors as passable and
/// locked doors as walls.
pub fn reachable_cells(s: &FullState) -> HashSet<Position> {
    let mut seen = HashSet::from([s.agent.pos]);
    let mut queue = VecDeque::from([s.agent.pos]);
    while let Some(p) = queue.pop_front() {
        for (dx, dy) in [(0, -1), (1, 0), (0, 1), (-1, 0)] {
            let q = p.offset(dx, dy);
            let open = match s.tile(q) {
                Tile::Floor => true,
                Tile::Door { state, .. } => state != DoorState::Locked,
                _ => false,
            };
            if open && seen.insert(q) {
                queue.push_back(q);
            }
        }
    }
    seen
}

/// Whether some reachable cell is adjacent to the target item.
pub fn target_reachable(s: &FullState) -> bool {
    let reach = reachable_cells(s);
    (0..s.tiles.len()).any(|i| {
        let p = Position::new(i as i32 % s.width, i as i32 / s.width);
        s.tile(p).item() == Some(s.target)
            && [(0, -1), (1, 0), (0, 1), (-1, 0)]
                .iter()
                .any(|&(dx, dy)| reach.contains(&p.offset(dx, dy)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Environment, TaskKind, TaskSpec};

    #[test]
    fn plans_replay_to_success() {
        for task in [TaskKind::GoToLocal, TaskKind::PickupLocal, TaskKind::UnlockLocal] {
            for seed in 0..10 {
                let mut env = Environment::new(TaskSpec::new(task), seed).unwrap();
                let plan = shortest_plan(env.ground_truth(), DEFAULT_EXPANSION_LIMIT).unwrap();
                let mut last = None;
                for a in &plan {
                    last = Some(env.step(*a).unwrap());
                }
                assert!(last.unwrap().success, "{task} seed {seed}");
            }
        }
    }
}
