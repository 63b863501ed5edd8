//! Breadth-first search over agent poses.

use std::collections::VecDeque;

use super::env::{step, target_in_reach};
use super::{Action, AgentState, GridConfig, Heading, Pitch, Scene, Target};

fn pose_index(scene: &Scene, s: AgentState) -> usize {
    ((s.y * scene.width() + s.x) * 4 + s.heading.index()) * 3 + s.pitch.index()
}

/// Minimum number of actions, the final Done included, that bring the agent
/// from `start` to a pose where Done succeeds. `None` when no such pose is
/// reachable.
pub fn shortest_path_len(scene: &Scene, start: AgentState, target: &Target, cfg: &GridConfig) -> Option<usize> {
    if !scene.is_walkable(start.x, start.y) {
        return None;
    }
    let mut dist = vec![usize::MAX; scene.width() * scene.height() * 12];
    let mut queue = VecDeque::new();
    dist[pose_index(scene, start)] = 0;
    queue.push_back(start);
    while let Some(s) = queue.pop_front() {
        let d = dist[pose_index(scene, s)];
        if target_in_reach(scene, s, target.class, cfg) {
            return Some(d + 1);
        }
        for a in &Action::ALL[..5] {
            let next = step(scene, s, *a).expect("walkable pose").state;
            let idx = pose_index(scene, next);
            if dist[idx] == usize::MAX {
                dist[idx] = d + 1;
                queue.push_back(next);
            }
        }
    }
    None
}

/// Every walkable cell is reachable from every other.
pub fn flood_fill_connected(scene: &Scene) -> bool {
    let cells = scene.walkable_cells();
    let Some(&first) = cells.first() else { return false };
    let mut seen = vec![false; scene.width() * scene.height()];
    let mut stack = vec![first];
    seen[first.1 * scene.width() + first.0] = true;
    let mut count = 1;
    while let Some((x, y)) = stack.pop() {
        for h in Heading::ALL {
            let (dx, dy) = h.forward();
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if scene.in_bounds(nx, ny) && scene.is_walkable(nx as usize, ny as usize) {
                let i = ny as usize * scene.width() + nx as usize;
                if !seen[i] {
                    seen[i] = true;
                    count += 1;
                    stack.push((nx as usize, ny as usize));
                }
            }
        }
    }
    count == cells.len()
}

/// All poses on walkable cells.
pub(crate) fn all_poses(scene: &Scene) -> Vec<AgentState> {
    let mut out = Vec::new();
    for (x, y) in scene.walkable_cells() {
        for h in Heading::ALL {
            for p in Pitch::ALL {
                out.push(AgentState::new(x, y, h, p));
            }
        }
    }
    out
}
