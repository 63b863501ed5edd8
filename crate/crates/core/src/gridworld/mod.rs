//! Deterministic 2-D grid navigation environment.
//!
//! Coordinates: `x` grows east, `y` grows south; heading 0 faces north.
//! Walls and objects both block movement; only walls block line of sight.

mod env;
mod generate;
mod scene;
mod search;

pub use env::{observe, step, success, Frame, StepOutcome, VisibleObject};
pub use generate::{generate_episode, generate_scene, training_pool, SceneKind, ScenePlan};
pub use scene::{ClassInfo, ClassSplit, Scene, SceneObject, SizeTag, SplitKind};
pub use search::{flood_fill_connected, shortest_path_len};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("unknown action id {0}")]
    UnknownAction(usize),
    #[error("invalid agent state {0:?}")]
    InvalidState(AgentState),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid class split: {0}")]
    InvalidSplit(String),
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("scene file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// Object class identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Body heading, in 90° steps clockwise from north.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn degrees(self) -> u32 {
        self.index() as u32 * 90
    }

    pub fn from_index(i: usize) -> Heading {
        Self::ALL[i % 4]
    }

    pub fn right(self) -> Heading {
        Self::from_index(self.index() + 1)
    }

    pub fn left(self) -> Heading {
        Self::from_index(self.index() + 3)
    }

    /// Unit step `(dx, dy)` in grid coordinates.
    pub fn forward(self) -> (i64, i64) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }
}

/// Camera pitch in 30° notches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pitch {
    Down,
    Level,
    Up,
}

impl Pitch {
    pub const ALL: [Pitch; 3] = [Pitch::Down, Pitch::Level, Pitch::Up];

    pub fn degrees(self) -> i32 {
        match self {
            Pitch::Down => -30,
            Pitch::Level => 0,
            Pitch::Up => 30,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn up(self) -> Pitch {
        match self {
            Pitch::Down => Pitch::Level,
            _ => Pitch::Up,
        }
    }

    pub fn down(self) -> Pitch {
        match self {
            Pitch::Up => Pitch::Level,
            _ => Pitch::Down,
        }
    }
}

/// Agent pose `(x, y, θr, θh)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentState {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
    pub pitch: Pitch,
}

impl AgentState {
    pub fn new(x: usize, y: usize, heading: Heading, pitch: Pitch) -> Self {
        Self { x, y, heading, pitch }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveAhead,
    RotateLeft,
    RotateRight,
    LookUp,
    LookDown,
    Done,
}

impl Action {
    pub const COUNT: usize = 6;
    pub const ALL: [Action; 6] =
        [Action::MoveAhead, Action::RotateLeft, Action::RotateRight, Action::LookUp, Action::LookDown, Action::Done];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Self::ALL.get(i).copied().ok_or(GridError::UnknownAction(i))
    }
}

/// Whether the agent is told the class label of its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Known,
    Unlabeled,
}

/// Episode target. For unlabeled targets the class is hidden from the agent
/// and only used to score success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub class: ClassId,
    pub kind: TargetKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// Index into the scene set.
    pub scene: usize,
    pub start: AgentState,
    pub target: Target,
    /// Split the target class belongs to.
    pub split: SplitKind,
    pub max_steps: usize,
    /// Shortest path length from `start`, Done included.
    pub shortest: usize,
}

/// Geometry and termination constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// View range in cells.
    pub view_range: f64,
    /// Half of the horizontal view aperture, degrees.
    pub half_fov_deg: f64,
    /// Success distance in cells.
    pub success_distance: f64,
    pub max_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { view_range: 5.0, half_fov_deg: 45.0, success_distance: 2.0, max_steps: 100 }
    }
}
