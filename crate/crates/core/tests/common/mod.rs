//! Deterministic stand-in for a chat-completions server.
#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use aec::encoder::{format_state_key, Obstacles, StateKey};
use aec::gridworld::DirectionPhrase;
use aec::llm::{completion_body, Transport, TransportError};
use sha2::{Digest, Sha256};

/// Replies depend only on the request body, so a cache built from one run
/// answers every request of an identical rerun.
#[derive(Default, Clone)]
pub struct MockLlm {
    pub calls: Arc<AtomicU64>,
}

fn hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn reply_for(prompt: &str, h: u64) -> String {
    if prompt.contains("STEP 0 - PARSE MISSION") {
        if h.is_multiple_of(11) {
            return "I am not sure.".into();
        }
        let dirs = match h % 4 {
            0 | 1 => vec![],
            2 => vec![DirectionPhrase::LeftAndForward],
            _ => vec![DirectionPhrase::Forward],
        };
        let key = StateKey {
            target_directions: dirs,
            carrying: false,
            obstacles: Obstacles::default(),
            target_one_step_forward: false,
        };
        return format!("Reasoning omitted.\n{}", format_state_key(&key));
    }
    if prompt.contains("determine if there is a target direction") {
        return if prompt.contains("Targets: target") { "yes" } else { "no" }.into();
    }
    if prompt.contains("ACTION SPACE") {
        let a = ["turn left", "turn right", "go forward", "go forward"][(h % 4) as usize];
        return format!("The corridor continues.\nAction: {a}");
    }
    // Graph updates: keep only the current room line; the updater repairs the rest.
    "Current Room: room A".into()
}

impl Transport for MockLlm {
    fn send(&self, _: &str, _: Option<&str>, body: &serde_json::Value) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let messages = body["messages"].as_array().expect("messages");
        let first = messages[0]["content"].as_str().unwrap_or_default();
        let all = body.to_string();
        Ok(completion_body(&reply_for(first, hash(&all))))
    }
}

/// Fails every request; proves a replay never touched the network.
pub struct Offline;

impl Transport for Offline {
    fn send(&self, _: &str, _: Option<&str>, _: &serde_json::Value) -> Result<String, TransportError> {
        Err(TransportError::Fatal("network disabled".into()))
    }
}

pub mod gen {
    use aec::encoder::{canonicalize, CanonicalKey, Obstacle, Obstacles, StateKey};
    use aec::gridworld::{Action, DirectionPhrase, DoorState, EntityKind};
    use aec::memory::{EpisodeBuffer, EpisodicMemory, MemoryMetadata};
    use rand::Rng;

    fn probe(rng: &mut impl Rng) -> Option<Obstacle> {
        match rng.gen_range(0..5) {
            0 | 1 => None,
            2 => Some(Obstacle::Wall),
            3 => Some(Obstacle::Object(EntityKind::CARRYABLE[rng.gen_range(0..3)])),
            _ => Some(Obstacle::Door(DoorState::ALL[rng.gen_range(0..3)])),
        }
    }

    pub fn state_key(rng: &mut impl Rng) -> StateKey {
        let mut dirs: Vec<DirectionPhrase> =
            DirectionPhrase::ALL.into_iter().filter(|_| rng.gen_bool(0.25)).collect();
        dirs.sort();
        StateKey {
            target_directions: dirs,
            carrying: rng.gen_bool(0.3),
            obstacles: Obstacles {
                forward: probe(rng),
                left: probe(rng),
                right: probe(rng),
            },
            target_one_step_forward: rng.gen_bool(0.1),
        }
    }

    pub fn key(rng: &mut impl Rng) -> CanonicalKey {
        canonicalize(&state_key(rng))
    }

    pub fn action(rng: &mut impl Rng) -> Action {
        Action::ALL[rng.gen_range(0..Action::ALL.len())]
    }

    /// Rewards shaped like the environment's: zero, or one success reward at the end.
    pub fn buffer(rng: &mut impl Rng, keys: &[CanonicalKey], max_len: usize) -> EpisodeBuffer<f64> {
        let len = rng.gen_range(1..=max_len);
        let win = rng.gen_bool(0.5);
        let mut b = EpisodeBuffer::new();
        for t in 0..len {
            let r = if win && t + 1 == len { rng.gen_range(0.1..=1.0) } else { 0.0 };
            b.record(keys[rng.gen_range(0..keys.len())].clone(), action(rng), r).unwrap();
        }
        b.seal();
        b
    }

    pub fn memory(rng: &mut impl Rng, n_updates: usize) -> EpisodicMemory<f64> {
        let mut m = EpisodicMemory::new(MemoryMetadata::new("GoToLocal", 0.99));
        for _ in 0..n_updates {
            let k = key(rng);
            let a = action(rng);
            m.update(&k, a, rng.gen_range(0.0..1.0));
        }
        m
    }
}

pub mod scenes {
    use aec::gridworld::{object_pairs, visible_cells, EgoOffset, Environment, FullState, TaskKind, TaskSpec, Tile};
    use rand::seq::SliceRandom;
    use rand::Rng;

    /// Two states that differ only in how far away the target sits along
    /// the same egocentric direction. Probe cells are left alone.
    pub fn distance_pair(rng: &mut impl Rng) -> Option<(FullState, FullState)> {
        let env = Environment::new(TaskSpec::new(TaskKind::GoToLocal), rng.gen()).ok()?;
        let mut s = env.ground_truth().clone();
        for i in 0..s.tiles.len() {
            if matches!(s.tiles[i], Tile::Object { .. }) {
                s.tiles[i] = Tile::Floor;
            }
        }
        let probes = [EgoOffset::new(0, 1), EgoOffset::new(-1, 0), EgoOffset::new(1, 0)];
        let mut cells: Vec<_> = visible_cells(&s)
            .into_iter()
            .filter(|(o, p)| s.tile(*p) == Tile::Floor && !probes.contains(o) && o.phrase().is_some())
            .collect();
        cells.shuffle(rng);
        let (i, j) = (0..cells.len())
            .flat_map(|i| (i + 1..cells.len()).map(move |j| (i, j)))
            .find(|&(i, j)| cells[i].0.phrase() == cells[j].0.phrase())?;
        let (near, far) = (cells[i].1, cells[j].1);
        let others: Vec<_> = object_pairs().into_iter().filter(|p| *p != s.target).collect();
        for (_, p) in cells.iter().filter(|(_, p)| *p != near && *p != far).take(rng.gen_range(0..5)) {
            s.set_tile(*p, Tile::object(*others.choose(rng).unwrap()));
        }
        let mut a = s.clone();
        a.set_tile(near, Tile::object(s.target));
        let mut b = s;
        b.set_tile(far, Tile::object(b.target));
        Some((a, b))
    }
}

pub mod graphs {
    use std::collections::BTreeSet;

    use aec::gridworld::{Action, Environment, TaskKind, TaskSpec};
    use aec::world_graph::{parse_graph_output, GraphStep, GraphUpdater, OracleGraphUpdater, WorldGraph};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Set inclusion over nodes, edge identities and features, written
    /// against the public fields only.
    pub fn retains(new: &WorldGraph, old: &WorldGraph) -> bool {
        let ids = |g: &WorldGraph| -> BTreeSet<_> {
            g.edges.iter().map(|e| (e.subject, e.relation.color, e.object)).collect()
        };
        old.nodes.is_subset(&new.nodes)
            && ids(old).is_subset(&ids(new))
            && old
                .features
                .iter()
                .all(|(r, items)| new.features.get(r).is_some_and(|n| items.is_subset(n)))
    }

    /// Corrupts a well-formed graph reply the way a careless model might.
    pub fn mutate(text: &str, rng: &mut impl Rng) -> String {
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        match rng.gen_range(0..6) {
            0 if lines.len() > 1 => {
                let i = rng.gen_range(1..lines.len());
                lines.remove(i);
            }
            1 => lines.retain(|l| !l.contains(" door, ")),
            2 => {
                for l in lines.iter_mut().filter(|l| l.contains('[')) {
                    if let Some(i) = l.find(", ") {
                        let end = l[i + 2..].find([',', ']']).map_or(l.len() - 1, |j| i + 2 + j);
                        l.replace_range(i..end, "");
                    }
                }
            }
            3 => {
                for l in lines.iter_mut() {
                    *l = l.replace(" open door", " locked door");
                }
            }
            4 => {
                let i = rng.gen_range(0..lines.len());
                lines.insert(i, "The agent should probably go north.".into());
            }
            _ => lines.shuffle(rng),
        }
        lines.join("\n")
    }

    #[derive(Debug, Default)]
    pub struct WalkStats {
        pub accepted: u64,
        pub failures: u64,
        pub repaired: u64,
        pub rejected: u64,
        pub rooms_seen: usize,
    }

    /// Random walk on a six-room layout. Every oracle update and every
    /// accepted mutated reply must retain its predecessor.
    pub fn retain_all_walk(seed: u64, steps: u32) -> WalkStats {
        let spec = TaskSpec::new(TaskKind::FindObj).with_max_steps(steps);
        let mut env = Environment::new(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a9a);
        let mut up = OracleGraphUpdater::default();
        let mut graph = WorldGraph::init();
        up.reset(&mut graph, env.ground_truth());
        let mut obs = env.reset();
        let mut st = WalkStats::default();
        // No pick-ups: the walk must not end the episode early.
        let moves = [Action::TurnLeft, Action::TurnRight, Action::GoForward, Action::GoForward, Action::Toggle];
        for _ in 0..steps {
            let before = env.ground_truth().clone();
            let action = *moves.choose(&mut rng).unwrap();
            let r = env.step(action).unwrap();
            let step = GraphStep {
                prev_obs: &obs,
                action,
                new_obs: &r.observation,
                before: &before,
                after: env.ground_truth(),
            };
            let next = up.update(&graph, &step).unwrap().graph;
            if retains(&next, &graph) {
                st.accepted += 1;
            } else {
                st.failures += 1;
            }
            match parse_graph_output(&mutate(&next.serialize(), &mut rng), &graph) {
                Ok(u) => {
                    if retains(&u.graph, &graph) {
                        st.accepted += 1;
                    } else {
                        st.failures += 1;
                    }
                    st.repaired += u.violations.len() as u64;
                }
                Err(_) => st.rejected += 1,
            }
            graph = next;
            obs = r.observation;
            if r.done {
                break;
            }
        }
        st.rooms_seen = graph.nodes.len();
        st
    }
}
