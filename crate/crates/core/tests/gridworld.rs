use std::collections::{HashMap, HashSet, VecDeque};

use aec::gridworld::planner::{shortest_plan, DEFAULT_EXPANSION_LIMIT};
use aec::gridworld::{
    render, visible_cells, Action, DoorState, EgoOffset, EntityKind, EnvError, Environment, FullState, Pose, TaskKind,
    TaskSpec, Tile, VIEW_DEPTH, VIEW_HALF_WIDTH,
};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Q = Ratio<i64>;

fn env(task: TaskKind, seed: u64) -> Environment {
    Environment::new(TaskSpec::new(task), seed).unwrap()
}

fn random_walk(e: &mut Environment, rng: &mut ChaCha8Rng, max: usize) -> Vec<FullState> {
    let mut states = vec![e.ground_truth().clone()];
    for _ in 0..max {
        if e.ground_truth().done {
            break;
        }
        let a = Action::ALL[rng.gen_range(0..6)];
        e.step(a).unwrap();
        states.push(e.ground_truth().clone());
    }
    states
}

#[test]
fn gotolocal_seed7_has_one_room_and_nine_objects() {
    let e = env(TaskKind::GoToLocal, 7);
    let s = e.ground_truth();
    assert_eq!(s.rooms.len(), 1);
    let objs = s.entity_multiset();
    assert_eq!(objs.len(), 9);
    assert!(objs.contains(&e.target()));
    assert!(e.mission().contains(&e.target().to_string()));
}

#[test]
fn unlocklocal_seed0_has_locked_door_and_matching_key() {
    let e = env(TaskKind::UnlockLocal, 0);
    let s = e.ground_truth();
    let locked: Vec<_> = s.doors().filter(|d| d.2 == DoorState::Locked).collect();
    assert!(!locked.is_empty());
    for (_, color, _) in locked {
        assert!(s.entity_multiset().iter().any(|i| i.kind == EntityKind::Key && i.color == color));
    }
}

#[test]
fn same_seed_same_actions_same_results() {
    for task in TaskKind::ALL {
        for seed in 0..10 {
            let mut a = env(task, seed);
            let mut b = env(task, seed);
            assert_eq!(a.ground_truth(), b.ground_truth());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                if a.ground_truth().done {
                    break;
                }
                let act = Action::ALL[rng.gen_range(0..6)];
                assert_eq!(a.step(act).unwrap(), b.step(act).unwrap());
            }
            assert_eq!(a.ground_truth(), b.ground_truth());
        }
    }
}

#[test]
fn reset_restores_first_observation() {
    let mut e = env(TaskKind::FindObj, 3);
    let first = e.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    random_walk(&mut e, &mut rng, 50);
    assert_eq!(e.reset(), first);
    assert_eq!(e.ground_truth().step_count, 0);
}

#[test]
fn step_after_done_is_an_error() {
    let mut e = Environment::new(TaskSpec::new(TaskKind::GoToLocal).with_max_steps(2), 1).unwrap();
    while !e.ground_truth().done {
        e.step(Action::TurnLeft).unwrap();
    }
    assert!(matches!(e.step(Action::TurnLeft), Err(EnvError::EpisodeDone)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn items_are_conserved(task in prop::sample::select(TaskKind::ALL.to_vec()), seed in any::<u64>(), walk in any::<u64>()) {
        let mut e = env(task, seed);
        let before = e.ground_truth().entity_multiset();
        let mut rng = ChaCha8Rng::seed_from_u64(walk);
        for s in random_walk(&mut e, &mut rng, 200) {
            prop_assert_eq!(s.entity_multiset(), before.clone());
            let on_grid = s.tiles.iter().filter(|t| matches!(t, Tile::Object { .. })).count();
            prop_assert_eq!(on_grid + usize::from(s.carrying.is_some()), before.len());
        }
    }

    #[test]
    fn rewards_are_bounded(task in prop::sample::select(TaskKind::ALL.to_vec()), seed in any::<u64>()) {
        let mut e = env(task, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let r = e.step(Action::ALL[rng.gen_range(0..6)]).unwrap();
            if r.success {
                prop_assert!(r.done);
                prop_assert!(r.reward > 0.1 && r.reward <= 1.0);
            } else {
                prop_assert_eq!(r.reward, 0.0);
            }
            if r.done {
                break;
            }
        }
    }
}

/// Whether the open segment between the centers of (0,0) and `t` meets the
/// open unit square centered on `c`, in exact arithmetic.
fn crosses(t: EgoOffset, c: EgoOffset) -> bool {
    let half = Q::new(1, 2);
    let mut lo = Q::from_integer(0);
    let mut hi = Q::from_integer(1);
    for (d, cc) in [(t.lateral, c.lateral), (t.forward, c.forward)] {
        let (a, b) = (Q::from_integer(cc as i64) - half, Q::from_integer(cc as i64) + half);
        if d == 0 {
            if !(a < Q::from_integer(0) && Q::from_integer(0) < b) {
                return false;
            }
            continue;
        }
        let d = Q::from_integer(d as i64);
        let (t1, t2) = (a / d, b / d);
        let (l, h) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        lo = lo.max(l);
        hi = hi.min(h);
    }
    lo < hi
}

fn oracle_visible(s: &FullState) -> HashSet<EgoOffset> {
    let mut out = HashSet::new();
    for f in 0..VIEW_DEPTH {
        for l in -VIEW_HALF_WIDTH..=VIEW_HALF_WIDTH {
            let t = EgoOffset::new(l, f);
            if (l, f) == (0, 0) || !s.in_bounds(t.to_world(s.agent)) {
                continue;
            }
            let mut blocked = false;
            for cf in -1..=f + 1 {
                for cl in -VIEW_HALF_WIDTH - 1..=VIEW_HALF_WIDTH + 1 {
                    let c = EgoOffset::new(cl, cf);
                    if c == t || (cl, cf) == (0, 0) || !crosses(t, c) {
                        continue;
                    }
                    blocked |= s.tile(c.to_world(s.agent)).is_opaque();
                }
            }
            if !blocked {
                out.insert(t);
            }
        }
    }
    out
}

#[test]
fn visibility_matches_exact_ray_casting() {
    let mut checked = 0;
    for task in TaskKind::ALL {
        for seed in 0..25 {
            let mut e = env(task, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for s in random_walk(&mut e, &mut rng, 60) {
                let got: HashSet<EgoOffset> = visible_cells(&s).into_iter().map(|(o, _)| o).collect();
                assert_eq!(got, oracle_visible(&s), "{task} seed {seed} pose {:?}", s.agent);
                // Every rendered line refers to a visible cell.
                let obs = render(&s);
                assert!(obs.view_lines.iter().all(|l| l.starts_with("You see a ")));
                assert!(obs.view_lines.len() <= got.len());
                checked += 1;
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn render_text_matches_ground_truth_render() {
    let mut e = env(TaskKind::FindObj, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..80 {
        assert_eq!(e.render_text(), render(e.ground_truth()));
        if e.step(Action::ALL[rng.gen_range(0..3)]).unwrap().done {
            break;
        }
    }
}

/// Shortest turn/forward sequence until the target is directly ahead.
fn bfs_goto(s: &FullState) -> Option<Vec<Action>> {
    let goal = |p: Pose| {
        let mut st = s.clone();
        st.agent = p;
        st.tile(st.front()).item() == Some(s.target)
    };
    let mut parent: HashMap<Pose, (Pose, Action)> = HashMap::new();
    let mut queue = VecDeque::from([s.agent]);
    let mut seen = HashSet::from([s.agent]);
    while let Some(p) = queue.pop_front() {
        if goal(p) {
            let mut plan = Vec::new();
            let mut cur = p;
            while let Some(&(prev, a)) = parent.get(&cur) {
                plan.push(a);
                cur = prev;
            }
            plan.reverse();
            return Some(plan);
        }
        let (dx, dy) = p.dir.vector();
        let ahead = p.pos.offset(dx, dy);
        let mut next = vec![
            (Pose { pos: p.pos, dir: p.dir.left() }, Action::TurnLeft),
            (Pose { pos: p.pos, dir: p.dir.right() }, Action::TurnRight),
        ];
        if s.in_bounds(ahead) && s.tile(ahead).is_passable() {
            next.push((Pose { pos: ahead, dir: p.dir }, Action::GoForward));
        }
        for (n, a) in next {
            if seen.insert(n) {
                parent.insert(n, (p, a));
                queue.push_back(n);
            }
        }
    }
    None
}

#[test]
fn optimal_gotolocal_reward_matches_bfs() {
    let mut solved = 0;
    for seed in 0..40 {
        let mut e = env(TaskKind::GoToLocal, seed);
        let s = e.ground_truth().clone();
        // Layouts where the target is boxed in need a pickup first.
        let Some(path) = bfs_goto(&s) else { continue };
        let k = path.len() as u32;
        if k == 0 {
            continue;
        }
        // The planner may also clear a path by picking things up.
        let plan = shortest_plan(&s, DEFAULT_EXPANSION_LIMIT).unwrap();
        assert!(plan.len() as u32 <= k, "seed {seed}");
        let mut last = None;
        for (i, a) in path.into_iter().enumerate() {
            let r = e.step(a).unwrap();
            assert_eq!(r.done, i as u32 + 1 == k, "seed {seed}: finished early");
            last = Some(r);
        }
        let r = last.unwrap();
        assert!(r.success);
        let want = 1.0 - 0.9 * f64::from(k) / f64::from(s.max_steps);
        assert!((r.reward - want).abs() < 1e-12, "seed {seed}: {} vs {want}", r.reward);
        solved += 1;
    }
    assert!(solved >= 30);
}
#[test]
fn snapshot_roundtrip_resumes_identically() {
    let mut e = env(TaskKind::UnlockLocal, 4);
    let snap = e.snapshot();
    let text = serde_json::to_string(&snap).unwrap();
    let mut f = Environment::from_snapshot(serde_json::from_str(&text).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..40 {
        let a = Action::ALL[rng.gen_range(0..6)];
        assert_eq!(e.step(a).unwrap(), f.step(a).unwrap());
        if e.ground_truth().done {
            break;
        }
    }
}
