use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ClassId, GridError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Known,
    Unknown,
    Unseen,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Known, SplitKind::Unknown, SplitKind::Unseen];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Known => "known",
            SplitKind::Unknown => "unknown",
            SplitKind::Unseen => "unseen",
        }
    }

    pub fn is_unlabeled(self) -> bool {
        self != SplitKind::Known
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
    pub attributes: Vec<String>,
}

/// Disjoint known / unknown / unseen class sets with their attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub vocabulary: Vec<String>,
    pub known: Vec<ClassInfo>,
    pub unknown: Vec<ClassInfo>,
    pub unseen: Vec<ClassInfo>,
}

impl ClassSplit {
    pub fn validate(&self) -> Result<()> {
        if self.known.is_empty() || self.unknown.is_empty() || self.unseen.is_empty() {
            return Err(GridError::InvalidSplit("every class set needs at least one class".into()));
        }
        let mut seen = BTreeSet::new();
        for c in self.all() {
            if !seen.insert(c.id) {
                return Err(GridError::InvalidSplit(format!("class {} appears twice", c.id)));
            }
            if c.attributes.is_empty() {
                return Err(GridError::InvalidSplit(format!("class {} has no attributes", c.id)));
            }
            if let Some(a) = c.attributes.iter().find(|a| !self.vocabulary.contains(a)) {
                return Err(GridError::InvalidSplit(format!("attribute `{a}` not in vocabulary")));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &ClassInfo> {
        self.known.iter().chain(&self.unknown).chain(&self.unseen)
    }

    pub fn classes(&self, kind: SplitKind) -> &[ClassInfo] {
        match kind {
            SplitKind::Known => &self.known,
            SplitKind::Unknown => &self.unknown,
            SplitKind::Unseen => &self.unseen,
        }
    }

    pub fn ids(&self, kind: SplitKind) -> Vec<ClassId> {
        self.classes(kind).iter().map(|c| c.id).collect()
    }

    pub fn kind_of(&self, class: ClassId) -> Option<SplitKind> {
        SplitKind::ALL.into_iter().find(|k| self.classes(*k).iter().any(|c| c.id == class))
    }

    pub fn info(&self, class: ClassId) -> Result<&ClassInfo> {
        self.all().find(|c| c.id == class).ok_or(GridError::UnknownClass(class))
    }

    /// Position of a known class within the known list.
    pub fn known_index(&self, class: ClassId) -> Option<usize> {
        self.known.iter().position(|c| c.id == class)
    }

    pub fn is_unlabeled(&self, class: ClassId) -> bool {
        matches!(self.kind_of(class), Some(SplitKind::Unknown | SplitKind::Unseen))
    }

    pub fn num_known(&self) -> usize {
        self.known.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeTag {
    Small,
    Big,
}

/// A placed object instance. Serialized as `[id, class, x, y, size]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(u32, ClassId, usize, usize, SizeTag)", into = "(u32, ClassId, usize, usize, SizeTag)")]
pub struct SceneObject {
    pub id: u32,
    pub class: ClassId,
    pub x: usize,
    pub y: usize,
    pub size: SizeTag,
}

impl From<(u32, ClassId, usize, usize, SizeTag)> for SceneObject {
    fn from((id, class, x, y, size): (u32, ClassId, usize, usize, SizeTag)) -> Self {
        Self { id, class, x, y, size }
    }
}

impl From<SceneObject> for (u32, ClassId, usize, usize, SizeTag) {
    fn from(o: SceneObject) -> Self {
        (o.id, o.class, o.x, o.y, o.size)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneRecord {
    id: u64,
    width: usize,
    height: usize,
    walls: Vec<(usize, usize)>,
    objects: Vec<SceneObject>,
    split: ClassSplit,
}

const FREE: u8 = 0;
const WALL: u8 = 1;
const OBJECT: u8 = 2;

/// Immutable grid layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneRecord", into = "SceneRecord")]
pub struct Scene {
    id: u64,
    width: usize,
    height: usize,
    walls: Vec<(usize, usize)>,
    objects: Vec<SceneObject>,
    split: ClassSplit,
    cells: Vec<u8>,
}

impl TryFrom<SceneRecord> for Scene {
    type Error = GridError;

    fn try_from(r: SceneRecord) -> Result<Self> {
        Scene::new(r.id, r.width, r.height, r.walls, r.objects, r.split)
    }
}

impl From<Scene> for SceneRecord {
    fn from(s: Scene) -> Self {
        SceneRecord { id: s.id, width: s.width, height: s.height, walls: s.walls, objects: s.objects, split: s.split }
    }
}

impl Scene {
    pub fn new(
        id: u64,
        width: usize,
        height: usize,
        mut walls: Vec<(usize, usize)>,
        objects: Vec<SceneObject>,
        split: ClassSplit,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GridError::InvalidScene("empty grid".into()));
        }
        split.validate()?;
        walls.sort_unstable();
        walls.dedup();
        let mut cells = vec![FREE; width * height];
        for &(x, y) in &walls {
            if x >= width || y >= height {
                return Err(GridError::InvalidScene(format!("wall ({x},{y}) outside grid")));
            }
            cells[y * width + x] = WALL;
        }
        let mut ids = BTreeSet::new();
        for o in &objects {
            if o.x >= width || o.y >= height {
                return Err(GridError::InvalidScene(format!("object {} outside grid", o.id)));
            }
            if cells[o.y * width + o.x] != FREE {
                return Err(GridError::InvalidScene(format!("object {} on an occupied cell", o.id)));
            }
            if split.kind_of(o.class).is_none() {
                return Err(GridError::UnknownClass(o.class));
            }
            if !ids.insert(o.id) {
                return Err(GridError::InvalidScene(format!("duplicate object id {}", o.id)));
            }
            cells[o.y * width + o.x] = OBJECT;
        }
        Ok(Self { id, width, height, walls, objects, split, cells })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn walls(&self) -> &[(usize, usize)] {
        &self.walls
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn split(&self) -> &ClassSplit {
        &self.split
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x] == WALL
    }

    /// Cell the agent may stand on.
    pub fn is_walkable(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.cells[y * self.width + x] == FREE
    }

    pub fn walkable_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_walkable(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn instances_of(&self, class: ClassId) -> impl Iterator<Item = &SceneObject> {
        self.objects.iter().filter(move |o| o.class == class)
    }

    pub fn classes_present(&self) -> BTreeSet<ClassId> {
        self.objects.iter().map(|o| o.class).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GridError::Format(e.to_string()))
    }
}
