//! Synthetic perception: attribute embeddings, per-class feature prototypes,
//! observation feature maps, a known-object detector and the egocentric pose
//! encoding.

mod oracle;
mod tfg;

pub use oracle::{ClassFeatureOracle, Detection, BEARING_BINS, DISTANCE_BINS};
pub use tfg::{Tfg, TfgReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{ClassId, ClassSplit, Frame, GridError};
use crate::numerics::{Matrix, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("attribute `{0}` is not in the vocabulary")]
    UnknownAttribute(String),
    #[error("attribute set is empty")]
    EmptyAttributes,
    #[error("target feature generator used before training")]
    NotTrained,
    #[error("object {0} is not visible in the frame")]
    NotVisible(u32),
    #[error("invalid perception config: {0}")]
    Config(String),
    #[error("could not draw separable prototypes")]
    Prototypes,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, PerceptionError>;

/// Sizes and noise levels for the synthetic features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionConfig {
    /// Rows of a feature map.
    pub d_g: usize,
    /// Feature width `D`.
    pub dim: usize,
    /// Feature noise `σ_f` as a fraction of the mean prototype norm.
    pub noise_ratio: f64,
    /// Background vector norm as a fraction of the mean prototype norm.
    pub background_ratio: f64,
    pub tfg_hidden: usize,
    pub tfg_epochs: usize,
    pub tfg_lr: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            d_g: 16,
            dim: 32,
            noise_ratio: 0.1,
            background_ratio: 0.25,
            tfg_hidden: 64,
            tfg_epochs: 1000,
            tfg_lr: 0.05,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_g < BEARING_BINS * DISTANCE_BINS {
            return Err(PerceptionError::Config(format!("d_g must be at least {}", BEARING_BINS * DISTANCE_BINS)));
        }
        if self.dim == 0 || self.tfg_hidden == 0 {
            return Err(PerceptionError::Config("zero width".into()));
        }
        if !(self.noise_ratio >= 0.0 && self.background_ratio >= 0.0 && self.tfg_lr > 0.0) {
            return Err(PerceptionError::Config("noise, background and learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Multi-hot vector over the attribute vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(Vec<f64>);

impl AttributeVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|v| **v > 0.0).count()
    }

    pub fn to_row(&self) -> Matrix {
        Matrix::row_vector(self.0.clone())
    }
}

pub fn attribute_embed(vocabulary: &[String], attributes: &[String]) -> Result<AttributeVector> {
    if attributes.is_empty() {
        return Err(PerceptionError::EmptyAttributes);
    }
    let mut v = vec![0.0; vocabulary.len()];
    for a in attributes {
        let i = vocabulary.iter().position(|w| w == a).ok_or_else(|| PerceptionError::UnknownAttribute(a.clone()))?;
        v[i] = 1.0;
    }
    Ok(AttributeVector(v))
}

pub fn class_attributes(split: &ClassSplit, class: ClassId) -> Result<AttributeVector> {
    let info = split.info(class)?;
    attribute_embed(&split.vocabulary, &info.attributes)
}

/// Egocentric coordinates `(lateral, forward, distance, sin b, cos b, pitch/30°)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose(pub [f64; 6]);

impl EgoPose {
    pub fn to_row(&self) -> Matrix {
        Matrix::row_vector(self.0.to_vec())
    }
}

/// Pose of visible object `object_id` relative to the agent.
pub fn ego_transform(frame: &Frame, object_id: u32) -> Result<EgoPose> {
    let o = frame.object(object_id).ok_or(PerceptionError::NotVisible(object_id))?;
    let b = o.bearing_deg.to_radians();
    Ok(EgoPose([o.lateral, o.forward, o.distance, b.sin(), b.cos(), frame.agent.pitch.degrees() as f64 / 30.0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{observe, AgentState, GridConfig, Heading, Pitch, Scene, SceneObject, SizeTag};

    fn split() -> ClassSplit {
        ClassSplit::toy(3, 6, 3, 2).unwrap()
    }

    #[test]
    fn embedding_is_deterministic_multi_hot() {
        let s = split();
        let a = class_attributes(&s, s.known[0].id).unwrap();
        assert_eq!(a, class_attributes(&s, s.known[0].id).unwrap());
        assert_eq!(a.len(), 16);
        assert_eq!(a.count(), s.known[0].attributes.len());
        assert!(a.as_slice().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert_eq!(attribute_embed(&s.vocabulary, &[]), Err(PerceptionError::EmptyAttributes));
        assert!(matches!(
            attribute_embed(&s.vocabulary, &["sparkly".into()]),
            Err(PerceptionError::UnknownAttribute(_))
        ));
    }

    #[test]
    fn shared_attributes_embed_identically() {
        let v = ClassSplit::toy_vocabulary();
        let x = attribute_embed(&v, &["metal".into(), "small".into()]).unwrap();
        let y = attribute_embed(&v, &["small".into(), "metal".into()]).unwrap();
        assert_eq!(x, y);
    }

    fn scene_with(objects: Vec<SceneObject>) -> Scene {
        Scene::new(4, 7, 7, vec![], objects, split()).unwrap()
    }

    #[test]
    fn ego_pose_examples() {
        let s = split();
        let o = SceneObject { id: 0, class: s.known[0].id, x: 3, y: 1, size: SizeTag::Small };
        let scene = scene_with(vec![o]);
        let cfg = GridConfig::default();
        let f = observe(&scene, AgentState::new(3, 3, Heading::North, Pitch::Level), &cfg);
        let p = ego_transform(&f, 0).unwrap();
        let want = [0.0, 2.0, 2.0, 0.0, 1.0, 0.0];
        for (a, b) in p.0.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", p.0);
        }
        assert_eq!(ego_transform(&f, 9), Err(PerceptionError::NotVisible(9)));
    }

    #[test]
    fn ego_pose_translation_and_rotation_invariant() {
        let s = split();
        let cfg = GridConfig::default();
        let o1 = SceneObject { id: 0, class: s.known[0].id, x: 2, y: 1, size: SizeTag::Small };
        let o2 = SceneObject { id: 0, class: s.known[0].id, x: 5, y: 5, size: SizeTag::Small };
        let f1 = observe(&scene_with(vec![o1]), AgentState::new(1, 3, Heading::North, Pitch::Up), &cfg);
        let f2 = observe(&scene_with(vec![o2]), AgentState::new(3, 4, Heading::East, Pitch::Up), &cfg);
        assert_eq!(ego_transform(&f1, 0).unwrap(), ego_transform(&f2, 0).unwrap());
    }

    #[test]
    fn bearing_ninety_gives_unit_sine() {
        let f = Frame {
            scene_id: 0,
            agent: AgentState::new(0, 0, Heading::North, Pitch::Level),
            objects: vec![crate::gridworld::VisibleObject {
                id: 1,
                class: ClassId(0),
                x: 1,
                y: 0,
                size: SizeTag::Small,
                forward: 0.0,
                lateral: 1.0,
                distance: 1.0,
                bearing_deg: 90.0,
            }],
            gt: false,
        };
        let p = ego_transform(&f, 1).unwrap();
        assert!((p.0[3] - 1.0).abs() < 1e-12 && p.0[4].abs() < 1e-12);
    }
}
