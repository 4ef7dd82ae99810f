//! Versioned prompt templates and slot filling.

use crate::gridworld::{Action, TaskKind};

pub const TEMPLATE_VERSION: &str = "v1";

pub const ENCODER: &str = include_str!("../prompts/v1/encoder.txt");
pub const ENCODER_FORMAT: &str = include_str!("../prompts/v1/encoder_format.txt");
pub const GRAPH: &str = include_str!("../prompts/v1/graph.txt");
pub const GRAPH_FORMAT: &str = include_str!("../prompts/v1/graph_format.txt");
pub const CRITIC: &str = include_str!("../prompts/v1/critic.txt");
pub const EXPLORER: &str = include_str!("../prompts/v1/explorer.txt");
pub const EXPLORER_FORMAT: &str = include_str!("../prompts/v1/explorer_format.txt");

/// Replaces `{name}` slots in one pass. Unknown slots are left as written
/// and substituted values are never rescanned.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match slots.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Static rules text for the game description slots.
pub fn game_description(task: TaskKind) -> String {
    let common = "You are an agent in a grid world made of rooms separated by walls. \
Each turn you observe only what lies in front of you, up to six tiles ahead and three to each side; \
walls and closed doors block your view. Observations list the objects you see with their distance \
in steps to the left, right and forward. Objects and walls block movement, open doors do not. \
You can carry at most one object at a time and can only pick up an object directly in front of you.";
    let task_rules = match task {
        TaskKind::GoToLocal => {
            "The mission is complete once you stand directly facing the named object, one step in front of you."
        }
        TaskKind::PickupLocal => {
            "The mission is complete once you pick up the named object. Your hands must be empty to pick something up."
        }
        TaskKind::UnlockLocal => {
            "The mission asks you to open a locked door. A locked door only opens when you toggle it while \
carrying a key of the same color, so you must first find and pick up the matching key, then face the door and toggle it."
        }
        TaskKind::FindObj => {
            "The target object lies in another room. Closed doors open when toggled. \
Explore room by room; the mission is complete once you pick up the named object."
        }
    };
    format!("{common} {task_rules}")
}

/// Action-space listing for the explorer prompt.
pub fn action_space() -> String {
    Action::ALL
        .iter()
        .map(|a| a.phrase())
        .collect::<Vec<_>>()
        .join(", ")
}
