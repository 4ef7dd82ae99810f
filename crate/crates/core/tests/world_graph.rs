mod common;

use common::graphs::{retain_all_walk, retains};
use aec::world_graph::{parse_graph_output, parse_graph_text, WorldGraph};

#[test]
fn random_walks_retain_all() {
    let mut repaired = 0;
    for seed in 0..10 {
        let st = retain_all_walk(seed, 300);
        assert_eq!(st.failures, 0, "seed {seed}: {st:?}");
        assert!(st.accepted >= 300);
        repaired += st.repaired;
    }
    assert!(repaired > 0);
}

#[test]
fn graph_that_forgets_everything_is_repaired() {
    let text = "Current Room: room B\nroom A [red ball, yellow door]\nroom B [grey key]\nroom A, yellow closed door, room B";
    let prior = parse_graph_text(text).unwrap();
    let up = parse_graph_output("Current Room: room B", &prior).unwrap();
    assert!(retains(&up.graph, &prior));
    // Room B survives through the current-room line; room A, three features and the edge do not.
    assert_eq!(up.violations.len(), 1 + 3 + 1);
    assert_eq!(up.graph.current_room, prior.current_room);
    assert!(retains(&prior, &WorldGraph::init()));
}
