use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{class_attributes, ego_transform, EgoPose, PerceptionConfig, PerceptionError, Result};
use crate::gridworld::{ClassId, ClassSplit, Frame, SplitKind, VisibleObject};
use crate::numerics::Matrix;
use crate::seeding;

pub const BEARING_BINS: usize = 3;
pub const DISTANCE_BINS: usize = 5;

/// Ground-truth class prototypes standing in for a pretrained visual
/// backbone. Prototypes are linear in the attribute vector, so unseen
/// attribute combinations have well-defined features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFeatureOracle {
    seed: u64,
    config: PerceptionConfig,
    sigma: f64,
    background: Vec<f64>,
    prototypes: BTreeMap<ClassId, Vec<f64>>,
}

/// A detected known-class object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ClassId,
    pub object: u32,
    pub feature: Vec<f64>,
    pub pose: EgoPose,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl ClassFeatureOracle {
    pub fn build(seed: u64, split: &ClassSplit, config: PerceptionConfig) -> Result<Self> {
        config.validate()?;
        split.validate()?;
        let dim = config.dim;
        for attempt in 0..100 {
            let mut rng = seeding::rng_for(seed, "prototypes", attempt);
            let basis: Vec<Vec<f64>> =
                (0..split.vocabulary.len()).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let mut prototypes = BTreeMap::new();
            for info in split.all() {
                let attrs = class_attributes(split, info.id)?;
                let k = attrs.count() as f64;
                let mut p = vec![0.0; dim];
                for (a, row) in attrs.as_slice().iter().zip(&basis) {
                    if *a > 0.0 {
                        for (o, b) in p.iter_mut().zip(row) {
                            *o += b / k.sqrt();
                        }
                    }
                }
                prototypes.insert(info.id, p);
            }
            let mean_norm = prototypes.values().map(|p| norm(p)).sum::<f64>() / prototypes.len() as f64;
            let sigma = config.noise_ratio * mean_norm;
            let protos: Vec<&Vec<f64>> = prototypes.values().collect();
            let min_dist = protos
                .iter()
                .enumerate()
                .flat_map(|(i, a)| protos[i + 1..].iter().map(move |b| dist(a, b)))
                .fold(f64::INFINITY, f64::min);
            if min_dist <= 4.0 * sigma {
                continue;
            }
            let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let scale = config.background_ratio * mean_norm / norm(&raw).max(1e-12);
            let background = raw.iter().map(|v| v * scale).collect();
            return Ok(Self { seed, config, sigma, background, prototypes });
        }
        Err(PerceptionError::Prototypes)
    }

    pub fn config(&self) -> &PerceptionConfig {
        &self.config
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn prototype(&self, class: ClassId) -> Result<&[f64]> {
        self.prototypes.get(&class).map(Vec::as_slice).ok_or(PerceptionError::Grid(crate::gridworld::GridError::UnknownClass(class)))
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let protos: Vec<&Vec<f64>> = self.prototypes.values().collect();
        let mut best = f64::INFINITY;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                best = best.min(dist(protos[i], protos[j]));
            }
        }
        best
    }

    /// Class whose prototype is closest to `v`.
    pub fn nearest_prototype(&self, v: &[f64]) -> ClassId {
        let mut best = (f64::INFINITY, ClassId(0));
        for (c, p) in &self.prototypes {
            let d = dist(v, p);
            if d < best.0 {
                best = (d, *c);
            }
        }
        best.1
    }

    /// Noisy feature of one visible object, seeded by the frame identity.
    pub fn object_feature(&self, frame: &Frame, obj: &VisibleObject) -> Result<Vec<f64>> {
        let a = frame.agent;
        let seed = seeding::derive(
            self.seed,
            &[seeding::tag("view"), frame.scene_id, a.x as u64, a.y as u64, a.heading.index() as u64, obj.id as u64],
        );
        let mut rng = seeding::rng(seed);
        let s = self.sigma / (self.config.dim as f64).sqrt();
        let proto = self.prototype(obj.class)?;
        Ok(proto.iter().map(|p| p + s * rng.sample::<f64, _>(StandardNormal)).collect())
    }

    /// Row of the feature map an object lands in.
    pub fn bin_of(obj: &VisibleObject) -> usize {
        let b = if obj.bearing_deg < -15.0 {
            0
        } else if obj.bearing_deg > 15.0 {
            2
        } else {
            1
        };
        let d = (obj.distance.round() as usize).clamp(1, DISTANCE_BINS) - 1;
        d * BEARING_BINS + b
    }

    /// `d_g × D` observation map: objects sharing a bin are averaged, empty
    /// rows hold the background vector.
    pub fn observation_features(&self, frame: &Frame) -> Result<Matrix> {
        let (rows, dim) = (self.config.d_g, self.config.dim);
        let mut sums = vec![vec![0.0; dim]; rows];
        let mut counts = vec![0usize; rows];
        for obj in &frame.objects {
            let f = self.object_feature(frame, obj)?;
            let r = Self::bin_of(obj);
            for (s, v) in sums[r].iter_mut().zip(&f) {
                *s += v;
            }
            counts[r] += 1;
        }
        let mut data = Vec::with_capacity(rows * dim);
        for (s, c) in sums.iter().zip(&counts) {
            if *c == 0 {
                data.extend_from_slice(&self.background);
            } else {
                data.extend(s.iter().map(|v| v / *c as f64));
            }
        }
        Ok(Matrix::from_vec(rows, dim, data)?)
    }

    /// One detection per visible known-class object.
    pub fn detect_known(&self, frame: &Frame, split: &ClassSplit) -> Result<Vec<Detection>> {
        let mut out = Vec::new();
        for obj in &frame.objects {
            if split.kind_of(obj.class) != Some(SplitKind::Known) {
                continue;
            }
            out.push(Detection {
                class: obj.class,
                object: obj.id,
                feature: self.object_feature(frame, obj)?,
                pose: ego_transform(frame, obj.id)?,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{
        generate_scene, observe, AgentState, GridConfig, Heading, Pitch, Scene, SceneKind, SceneObject, ScenePlan, SizeTag,
    };

    fn setup() -> (ClassSplit, ClassFeatureOracle) {
        let split = ClassSplit::toy(3, 6, 3, 2).unwrap();
        let oracle = ClassFeatureOracle::build(8, &split, PerceptionConfig::default()).unwrap();
        (split, oracle)
    }

    #[test]
    fn prototypes_are_separated() {
        let (_, o) = setup();
        assert!(o.min_pairwise_distance() > 4.0 * o.sigma());
    }

    #[test]
    fn empty_frame_is_background() {
        let (split, o) = setup();
        let scene = Scene::new(0, 3, 3, vec![], vec![], split).unwrap();
        let f = observe(&scene, AgentState::new(1, 1, Heading::North, Pitch::Level), &GridConfig::default());
        let m = o.observation_features(&f).unwrap();
        assert_eq!(m.shape(), (16, 32));
        for r in 0..16 {
            assert_eq!(m.row(r), o.background());
        }
    }

    #[test]
    fn single_object_gives_one_row_near_its_prototype() {
        let (split, o) = setup();
        let class = split.unseen[1].id;
        let obj = SceneObject { id: 0, class, x: 2, y: 0, size: SizeTag::Small };
        let scene = Scene::new(0, 5, 5, vec![], vec![obj], split).unwrap();
        let f = observe(&scene, AgentState::new(2, 3, Heading::North, Pitch::Level), &GridConfig::default());
        let m = o.observation_features(&f).unwrap();
        assert_eq!(m, o.observation_features(&f).unwrap());
        let differing: Vec<usize> = (0..16).filter(|r| m.row(*r) != o.background()).collect();
        assert_eq!(differing.len(), 1);
        assert_eq!(o.nearest_prototype(m.row(differing[0])), class);
    }

    #[test]
    fn detector_skips_unlabeled_objects() {
        let (split, o) = setup();
        let k = SceneObject { id: 0, class: split.known[2].id, x: 1, y: 0, size: SizeTag::Small };
        let u = SceneObject { id: 1, class: split.unknown[0].id, x: 3, y: 1, size: SizeTag::Big };
        let scene = Scene::new(0, 5, 5, vec![], vec![k, u], split.clone()).unwrap();
        let f = observe(&scene, AgentState::new(2, 3, Heading::North, Pitch::Level), &GridConfig::default());
        assert_eq!(f.objects.len(), 2);
        let d = o.detect_known(&f, &split).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class, split.known[2].id);
        let far = observe(&scene, AgentState::new(2, 3, Heading::South, Pitch::Level), &GridConfig::default());
        assert!(o.detect_known(&far, &split).unwrap().is_empty());
    }

    #[test]
    fn detections_stay_within_three_sigma() {
        let (split, o) = setup();
        let cfg = GridConfig::default();
        let (mut total, mut close) = (0usize, 0usize);
        for seed in 0..1000u64 {
            let scene = generate_scene(seed % 25, &ScenePlan::default(), &split, SceneKind::Train, &cfg).unwrap();
            let cells = scene.walkable_cells();
            let (x, y) = cells[(seeding::mix64(seed) % cells.len() as u64) as usize];
            let st = AgentState::new(x, y, Heading::from_index(seed as usize), Pitch::Level);
            let frame = observe(&scene, st, &cfg);
            let dets = o.detect_known(&frame, &split).unwrap();
            if dets.is_empty() {
                continue;
            }
            total += 1;
            if dets.iter().all(|d| dist(&d.feature, o.prototype(d.class).unwrap()) <= 3.0 * o.sigma()) {
                close += 1;
            }
        }
        assert!(total > 300);
        assert!(close as f64 >= 0.99 * total as f64, "{close}/{total}");
    }
}
