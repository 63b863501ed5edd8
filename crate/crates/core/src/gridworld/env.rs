use serde::{Deserialize, Serialize};

use super::{Action, AgentState, ClassId, GridConfig, GridError, Result, Scene, SceneObject, SizeTag, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub state: AgentState,
    pub terminal: bool,
    pub collision: bool,
}

/// Applies one action. Pure in its inputs.
pub fn step(scene: &Scene, state: AgentState, action: Action) -> Result<StepOutcome> {
    if !scene.is_walkable(state.x, state.y) {
        return Err(GridError::InvalidState(state));
    }
    let mut next = state;
    let mut collision = false;
    match action {
        Action::MoveAhead => {
            let (dx, dy) = state.heading.forward();
            let (nx, ny) = (state.x as i64 + dx, state.y as i64 + dy);
            if scene.in_bounds(nx, ny) && scene.is_walkable(nx as usize, ny as usize) {
                next.x = nx as usize;
                next.y = ny as usize;
            } else {
                collision = true;
            }
        }
        Action::RotateLeft => next.heading = state.heading.left(),
        Action::RotateRight => next.heading = state.heading.right(),
        Action::LookUp => next.pitch = state.pitch.up(),
        Action::LookDown => next.pitch = state.pitch.down(),
        Action::Done => {}
    }
    Ok(StepOutcome { state: next, terminal: action == Action::Done, collision })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibleObject {
    pub id: u32,
    pub class: ClassId,
    pub x: usize,
    pub y: usize,
    pub size: SizeTag,
    /// Offset along the heading, cells.
    pub forward: f64,
    /// Offset to the right of the heading, cells.
    pub lateral: f64,
    pub distance: f64,
    /// Degrees, positive to the right.
    pub bearing_deg: f64,
}

/// Egocentric view of the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub scene_id: u64,
    pub agent: AgentState,
    pub objects: Vec<VisibleObject>,
    /// An unknown or unseen object is visible.
    pub gt: bool,
}

impl Frame {
    pub fn contains_class(&self, class: ClassId) -> bool {
        self.objects.iter().any(|o| o.class == class)
    }

    pub fn object(&self, id: u32) -> Option<&VisibleObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// Relative geometry of `obj` seen from `state`, if it lies in the view cone
/// and no wall interrupts the line of sight.
pub(crate) fn sight(scene: &Scene, state: AgentState, obj: &SceneObject, cfg: &GridConfig) -> Option<VisibleObject> {
    let (fx, fy) = state.heading.forward();
    let (rx, ry) = state.heading.right().forward();
    let dx = obj.x as i64 - state.x as i64;
    let dy = obj.y as i64 - state.y as i64;
    let forward = (dx * fx + dy * fy) as f64;
    let lateral = (dx * rx + dy * ry) as f64;
    if forward <= 0.0 {
        return None;
    }
    let bearing_deg = lateral.atan2(forward).to_degrees();
    if bearing_deg.abs() > cfg.half_fov_deg + 1e-9 {
        return None;
    }
    let distance = forward.hypot(lateral);
    if distance > cfg.view_range + 1e-9 {
        return None;
    }
    if !line_of_sight(scene, (state.x, state.y), (obj.x, obj.y)) {
        return None;
    }
    Some(VisibleObject {
        id: obj.id,
        class: obj.class,
        x: obj.x,
        y: obj.y,
        size: obj.size,
        forward,
        lateral,
        distance,
        bearing_deg,
    })
}

/// True when the segment between the two cell centres does not pass through
/// the interior of any wall cell. Touching a wall corner does not block.
pub(crate) fn line_of_sight(scene: &Scene, from: (usize, usize), to: (usize, usize)) -> bool {
    let (x0, y0) = (from.0 as f64, from.1 as f64);
    let (dx, dy) = (to.0 as f64 - x0, to.1 as f64 - y0);
    scene.walls().iter().all(|&(wx, wy)| !segment_hits_cell(x0, y0, dx, dy, wx as f64, wy as f64))
}

/// Liang-Barsky clip of `p(t) = (x0, y0) + t·(dx, dy)`, `t ∈ [0, 1]`, against
/// the open unit square centred on `(cx, cy)`.
fn segment_hits_cell(x0: f64, y0: f64, dx: f64, dy: f64, cx: f64, cy: f64) -> bool {
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    for (p, d, c) in [(x0, dx, cx), (y0, dy, cy)] {
        if d == 0.0 {
            if (p - c).abs() >= 0.5 {
                return false;
            }
            continue;
        }
        let t1 = (c - 0.5 - p) / d;
        let t2 = (c + 0.5 - p) / d;
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    lo < hi
}

/// Everything visible from `state`.
pub fn observe(scene: &Scene, state: AgentState, cfg: &GridConfig) -> Frame {
    let objects: Vec<VisibleObject> = scene.objects().iter().filter_map(|o| sight(scene, state, o, cfg)).collect();
    let gt = objects.iter().any(|o| scene.split().is_unlabeled(o.class));
    Frame { scene_id: scene.id(), agent: state, objects, gt }
}

/// An instance of `class` is visible within the success distance.
pub(crate) fn target_in_reach(scene: &Scene, state: AgentState, class: ClassId, cfg: &GridConfig) -> bool {
    scene
        .instances_of(class)
        .filter_map(|o| sight(scene, state, o, cfg))
        .any(|v| v.distance <= cfg.success_distance + 1e-9)
}

/// Episode success: Done was issued within the step budget while a target
/// instance is in view and close enough.
pub fn success(
    scene: &Scene,
    state: AgentState,
    target: &Target,
    issued_done: bool,
    steps_used: usize,
    cfg: &GridConfig,
) -> bool {
    issued_done && steps_used <= cfg.max_steps && target_in_reach(scene, state, target.class, cfg)
}
