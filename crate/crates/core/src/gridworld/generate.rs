//! Seeded scene, split and episode generators.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::target_in_reach;
use super::search::{all_poses, flood_fill_connected, shortest_path_len};
use super::{
    AgentState, ClassId, ClassInfo, ClassSplit, EpisodeSpec, GridConfig, GridError, Heading, Pitch, Result, Scene,
    SceneObject, SizeTag, SplitKind, Target, TargetKind,
};
use crate::seeding;

/// Training scenes hold known and unknown classes only; test scenes add
/// unseen classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Train,
    Test,
}

/// Layout parameters for [`generate_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePlan {
    pub width: usize,
    pub height: usize,
    pub wall_density: f64,
    /// Known classes placed per scene (clamped to the split size).
    pub known_per_scene: usize,
    pub unknown_per_scene: usize,
    /// Unseen classes per test scene; training scenes never get any.
    pub unseen_per_scene: usize,
}

impl Default for ScenePlan {
    fn default() -> Self {
        Self { width: 8, height: 8, wall_density: 0.1, known_per_scene: 6, unknown_per_scene: 2, unseen_per_scene: 1 }
    }
}

const ATTEMPTS: u64 = 200;

const SIZES: [&str; 2] = ["small", "big"];
const MATERIALS: [&str; 6] = ["metal", "plastic", "glass", "ceramic", "wood", "fabric"];
const TRAITS: [&str; 8] = ["pickupable", "receptacle", "openable", "toggleable", "electronic", "soft", "tall", "flat"];

const KNOWN_NAMES: [&str; 12] = [
    "AlarmClock", "Bowl", "Bread", "Chair", "Laptop", "Pillow", "Fridge", "Sink", "Toilet", "Sofa", "Kettle", "DeskLamp",
];
const UNKNOWN_NAMES: [&str; 6] = ["Book", "Microwave", "Television", "Toaster", "FloorLamp", "Bathtub"];
const UNSEEN_NAMES: [&str; 6] = ["Apple", "Knife", "Cup", "Boots", "Pot", "KeyChain"];

impl ClassSplit {
    /// The 16-entry attribute vocabulary used by [`ClassSplit::toy`].
    pub fn toy_vocabulary() -> Vec<String> {
        SIZES.iter().chain(&MATERIALS).chain(&TRAITS).map(|s| s.to_string()).collect()
    }

    /// Synthetic split with `known`/`unknown`/`unseen` classes and random,
    /// pairwise distinct attribute sets (one size, one material, 1–3 traits).
    pub fn toy(seed: u64, known: usize, unknown: usize, unseen: usize) -> Result<ClassSplit> {
        if known == 0 || unknown == 0 || unseen == 0 {
            return Err(GridError::InvalidSplit("class counts must be positive".into()));
        }
        let mut rng = seeding::rng_for(seed, "split", 0);
        let mut used: Vec<Vec<String>> = Vec::new();
        let mut next_id = 0u16;
        let mut make = |count: usize, names: &[&str], prefix: &str, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut out = Vec::new();
            for i in 0..count {
                let attributes = loop {
                    let mut attrs = vec![SIZES.choose(rng).unwrap().to_string(), MATERIALS.choose(rng).unwrap().to_string()];
                    let k = rng.random_range(1..=3);
                    let mut traits = TRAITS.to_vec();
                    traits.shuffle(rng);
                    attrs.extend(traits[..k].iter().map(|s| s.to_string()));
                    let mut sorted = attrs.clone();
                    sorted.sort();
                    if !used.contains(&sorted) {
                        used.push(sorted);
                        break attrs;
                    }
                };
                let name = names.get(i).map_or_else(|| format!("{prefix}{i}"), |n| n.to_string());
                out.push(ClassInfo { id: ClassId(next_id), name, attributes });
                next_id += 1;
            }
            out
        };
        let known = make(known, &KNOWN_NAMES, "Known", &mut rng);
        let unknown = make(unknown, &UNKNOWN_NAMES, "Unknown", &mut rng);
        let unseen = make(unseen, &UNSEEN_NAMES, "Unseen", &mut rng);
        let split = ClassSplit { vocabulary: Self::toy_vocabulary(), known, unknown, unseen };
        split.validate()?;
        Ok(split)
    }
}

fn size_of(info: &ClassInfo) -> SizeTag {
    if info.attributes.iter().any(|a| a == "big") {
        SizeTag::Big
    } else {
        SizeTag::Small
    }
}

fn pick_classes<R: Rng>(rng: &mut R, split: &ClassSplit, kind: SplitKind, count: usize) -> Vec<ClassInfo> {
    let mut pool = split.classes(kind).to_vec();
    pool.shuffle(rng);
    pool.truncate(count.min(pool.len()));
    pool
}

/// Builds a scene deterministically from `seed`.
pub fn generate_scene(seed: u64, plan: &ScenePlan, split: &ClassSplit, kind: SceneKind, cfg: &GridConfig) -> Result<Scene> {
    split.validate()?;
    for attempt in 0..ATTEMPTS {
        let mut rng = seeding::rng_for(seed, "scene", attempt);
        let mut walls = Vec::new();
        for y in 0..plan.height {
            for x in 0..plan.width {
                if rng.random_bool(plan.wall_density.clamp(0.0, 1.0)) {
                    walls.push((x, y));
                }
            }
        }
        let empty = Scene::new(seed, plan.width, plan.height, walls.clone(), vec![], split.clone())?;
        if !flood_fill_connected(&empty) {
            continue;
        }
        let mut classes = pick_classes(&mut rng, split, SplitKind::Known, plan.known_per_scene);
        classes.extend(pick_classes(&mut rng, split, SplitKind::Unknown, plan.unknown_per_scene));
        if kind == SceneKind::Test {
            classes.extend(pick_classes(&mut rng, split, SplitKind::Unseen, plan.unseen_per_scene));
        }
        if let Some(scene) = place_objects(&mut rng, seed, plan, split, walls, &classes, cfg)? {
            return Ok(scene);
        }
    }
    Err(GridError::Generation(format!("no valid layout for seed {seed} after {ATTEMPTS} attempts")))
}

fn place_objects<R: Rng>(
    rng: &mut R,
    seed: u64,
    plan: &ScenePlan,
    split: &ClassSplit,
    walls: Vec<(usize, usize)>,
    classes: &[ClassInfo],
    cfg: &GridConfig,
) -> Result<Option<Scene>> {
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut scene = Scene::new(seed, plan.width, plan.height, walls.clone(), vec![], split.clone())?;
    for (i, info) in classes.iter().enumerate() {
        let mut cells = scene.walkable_cells();
        cells.shuffle(rng);
        let mut placed = false;
        for (x, y) in cells {
            let obj = SceneObject { id: i as u32, class: info.id, x, y, size: size_of(info) };
            let mut trial_objects = objects.clone();
            trial_objects.push(obj);
            let trial = Scene::new(seed, plan.width, plan.height, walls.clone(), trial_objects.clone(), split.clone())?;
            if !flood_fill_connected(&trial) {
                continue;
            }
            // Every object placed so far must stay approachable.
            let approachable = trial_objects
                .iter()
                .all(|o| all_poses(&trial).into_iter().any(|p| target_in_reach(&trial, p, o.class, cfg)));
            if approachable {
                objects = trial_objects;
                scene = trial;
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(None);
        }
    }
    Ok(Some(scene))
}

/// Draws an episode whose target class comes from `pool` and is present in
/// the scene, with a start pose at least `min_shortest` actions away.
pub fn generate_episode(
    seed: u64,
    scene_index: usize,
    scene: &Scene,
    pool: &[ClassId],
    min_shortest: usize,
    cfg: &GridConfig,
) -> Result<EpisodeSpec> {
    let present = scene.classes_present();
    let candidates: Vec<ClassId> = pool.iter().copied().filter(|c| present.contains(c)).collect();
    if candidates.is_empty() {
        return Err(GridError::Generation("no target class from the pool is present in the scene".into()));
    }
    let cells = scene.walkable_cells();
    for attempt in 0..ATTEMPTS {
        let mut rng = seeding::rng_for(seed, "episode", attempt);
        let class = *candidates.choose(&mut rng).expect("non-empty");
        let &(x, y) = cells.choose(&mut rng).expect("scene has walkable cells");
        let heading = Heading::from_index(rng.random_range(0..4));
        let start = AgentState::new(x, y, heading, Pitch::Level);
        let split = scene.split().kind_of(class).ok_or(GridError::UnknownClass(class))?;
        let kind = if split == SplitKind::Known { TargetKind::Known } else { TargetKind::Unlabeled };
        let target = Target { class, kind };
        if let Some(len) = shortest_path_len(scene, start, &target, cfg) {
            if len >= min_shortest {
                return Ok(EpisodeSpec { scene: scene_index, start, target, split, max_steps: cfg.max_steps, shortest: len });
            }
        }
    }
    Err(GridError::Generation(format!("no admissible start pose for seed {seed}")))
}

/// Target classes a training episode may draw: known and unknown only.
pub fn training_pool(split: &ClassSplit, include_unknown: bool) -> Vec<ClassId> {
    let mut pool = split.ids(SplitKind::Known);
    if include_unknown {
        pool.extend(split.ids(SplitKind::Unknown));
    }
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split() -> ClassSplit {
        ClassSplit::toy(1, 6, 3, 2).unwrap()
    }

    #[test]
    fn toy_split_is_valid_and_distinct() {
        let s = split();
        assert_eq!((s.known.len(), s.unknown.len(), s.unseen.len()), (6, 3, 2));
        let mut sets: Vec<Vec<String>> = s
            .all()
            .map(|c| {
                let mut a = c.attributes.clone();
                a.sort();
                a
            })
            .collect();
        sets.sort();
        sets.dedup();
        assert_eq!(sets.len(), 11);
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = GridConfig::default();
        let a = generate_scene(5, &ScenePlan::default(), &split(), SceneKind::Train, &cfg).unwrap();
        let b = generate_scene(5, &ScenePlan::default(), &split(), SceneKind::Train, &cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn training_scenes_have_no_unseen_objects() {
        let cfg = GridConfig::default();
        let s = split();
        for seed in 0..5 {
            let scene = generate_scene(seed, &ScenePlan::default(), &s, SceneKind::Train, &cfg).unwrap();
            assert!(scene.objects().iter().all(|o| s.kind_of(o.class) != Some(SplitKind::Unseen)));
            let test = generate_scene(seed, &ScenePlan::default(), &s, SceneKind::Test, &cfg).unwrap();
            assert!(test.objects().iter().any(|o| s.kind_of(o.class) == Some(SplitKind::Unseen)));
        }
    }

    #[test]
    fn training_pool_never_yields_unseen() {
        let cfg = GridConfig::default();
        let s = split();
        let scene = generate_scene(3, &ScenePlan::default(), &s, SceneKind::Test, &cfg).unwrap();
        let pool = training_pool(&s, true);
        for seed in 0..40 {
            if let Ok(ep) = generate_episode(seed, 0, &scene, &pool, 1, &cfg) {
                assert_ne!(ep.split, SplitKind::Unseen);
            }
        }
    }

    #[test]
    fn episodes_respect_min_shortest() {
        let cfg = GridConfig::default();
        let s = split();
        let scene = generate_scene(9, &ScenePlan::default(), &s, SceneKind::Train, &cfg).unwrap();
        for seed in 0..10 {
            let ep = generate_episode(seed, 0, &scene, &training_pool(&s, true), 3, &cfg).unwrap();
            assert!(ep.shortest >= 3);
            assert_eq!(shortest_path_len(&scene, ep.start, &ep.target, &cfg), Some(ep.shortest));
        }
    }

    #[test]
    fn missing_pool_class_errors() {
        let cfg = GridConfig::default();
        let s = split();
        let scene = generate_scene(2, &ScenePlan::default(), &s, SceneKind::Train, &cfg).unwrap();
        assert!(generate_episode(0, 0, &scene, &s.ids(SplitKind::Unseen), 1, &cfg).is_err());
    }

    #[test]
    fn twenty_default_scenes_are_connected() {
        let cfg = GridConfig::default();
        let s = split();
        for seed in 0..20 {
            let scene = generate_scene(seed, &ScenePlan::default(), &s, SceneKind::Train, &cfg).unwrap();
            let free = scene.walkable_cells();
            let mut reached = vec![free[0]];
            let mut frontier = vec![free[0]];
            while let Some((x, y)) = frontier.pop() {
                for c in &free {
                    let adjacent = c.0.abs_diff(x) + c.1.abs_diff(y) == 1;
                    if adjacent && !reached.contains(c) {
                        reached.push(*c);
                        frontier.push(*c);
                    }
                }
            }
            assert_eq!(reached.len(), free.len(), "seed {seed}");
        }
    }
}
