use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{MetaError, Result};
use crate::gridworld::{
    generate_scene, observe, AgentState, ClassId, ClassSplit, Frame, GridConfig, GridError, Scene, SceneKind, ScenePlan,
    SplitKind, Target, TargetKind,
};
use crate::numerics::Matrix;
use crate::perception::{class_attributes, ClassFeatureOracle, Detection, PerceptionConfig, Tfg, TfgReport};
use crate::seeding;
use crate::uoi::{build_frame_dataset, pretrain, PretrainConfig, PretrainReport, Uoi, UoiConfig, UoiOutput};

/// Everything that shapes the simulated world and the frozen perception
/// stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub known: usize,
    pub unknown: usize,
    pub unseen: usize,
    pub plan: ScenePlan,
    pub grid: GridConfig,
    pub perception: PerceptionConfig,
    pub uoi: UoiConfig,
    pub uoi_pretrain: PretrainConfig,
    pub uoi_frames_per_class: usize,
    pub held_out_frames_per_class: usize,
    pub train_scenes: usize,
    pub held_out_scenes: usize,
    pub test_scenes: usize,
    /// Minimum shortest-path length of generated episodes.
    pub min_shortest: usize,
    /// Co-visibility radius for graph edges, in cells.
    pub covis_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            known: 6,
            unknown: 3,
            unseen: 2,
            plan: ScenePlan::default(),
            grid: GridConfig::default(),
            perception: PerceptionConfig::default(),
            uoi: UoiConfig::default(),
            uoi_pretrain: PretrainConfig::default(),
            uoi_frames_per_class: 2000,
            held_out_frames_per_class: 200,
            train_scenes: 20,
            held_out_scenes: 5,
            test_scenes: 10,
            min_shortest: 3,
            covis_radius: 3.0,
        }
    }
}

impl WorldConfig {
    /// Few scenes and short pretraining, for tests and smoke runs.
    pub fn small() -> Self {
        let mut c = Self {
            uoi_frames_per_class: 60,
            held_out_frames_per_class: 20,
            train_scenes: 4,
            held_out_scenes: 1,
            test_scenes: 2,
            ..Self::default()
        };
        c.perception.tfg_epochs = 100;
        c.uoi_pretrain.epochs = 1;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.held_out_scenes == 0 || self.test_scenes == 0 {
            return Err(MetaError::Config("every scene set needs at least one scene".into()));
        }
        if self.known == 0 || self.unknown == 0 || self.unseen == 0 {
            return Err(MetaError::Config("every class split needs at least one class".into()));
        }
        if self.perception.dim != self.uoi.d_f {
            return Err(MetaError::Config(format!(
                "feature width {} differs from identifier width {}",
                self.perception.dim, self.uoi.d_f
            )));
        }
        Ok(())
    }
}

/// Class split plus the three scene sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSet {
    pub seed: u64,
    pub split: ClassSplit,
    pub train: Vec<Scene>,
    pub held_out: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl SceneSet {
    pub fn scenes(&self, kind: SceneKind) -> &[Scene] {
        match kind {
            SceneKind::Train => &self.train,
            SceneKind::Test => &self.test,
        }
    }
}

pub fn gen_scenes(seed: u64, cfg: &WorldConfig) -> Result<SceneSet> {
    cfg.validate()?;
    let split = ClassSplit::toy(seeding::derive(seed, &[seeding::tag("split")]), cfg.known, cfg.unknown, cfg.unseen)?;
    let make = |label: &str, n: usize, kind: SceneKind| -> Result<Vec<Scene>> {
        (0..n)
            .map(|i| {
                let s = seeding::derive(seed, &[seeding::tag(label), i as u64]);
                Ok(generate_scene(s, &cfg.plan, &split, kind, &cfg.grid)?)
            })
            .collect()
    };
    Ok(SceneSet {
        seed,
        train: make("scene-train", cfg.train_scenes, SceneKind::Train)?,
        held_out: make("scene-held-out", cfg.held_out_scenes, SceneKind::Train)?,
        test: make("scene-test", cfg.test_scenes, SceneKind::Test)?,
        split,
    })
}

pub fn build_oracle(set: &SceneSet, cfg: &WorldConfig) -> Result<ClassFeatureOracle> {
    Ok(ClassFeatureOracle::build(seeding::derive(set.seed, &[seeding::tag("oracle")]), &set.split, cfg.perception)?)
}

pub fn pretrain_tfg(set: &SceneSet, oracle: &ClassFeatureOracle, cfg: &WorldConfig) -> Result<(Tfg, TfgReport)> {
    let vocab = set.split.vocabulary.len();
    let mut tfg = Tfg::new(seeding::derive(set.seed, &[seeding::tag("tfg")]), vocab, &cfg.perception)?;
    let report = tfg.train(&set.split, oracle)?;
    Ok((tfg, report))
}

/// Generated maps of the unknown classes, in split order.
pub fn feature_bank(tfg: &Tfg, split: &ClassSplit) -> Result<Vec<Matrix>> {
    split.unknown.iter().map(|c| Ok(tfg.generate(&class_attributes(split, c.id)?)?)).collect()
}

pub fn pretrain_uoi(
    set: &SceneSet,
    oracle: &ClassFeatureOracle,
    bank: &[Matrix],
    cfg: &WorldConfig,
) -> Result<(Uoi, PretrainReport)> {
    let seed = seeding::derive(set.seed, &[seeding::tag("uoi")]);
    let positive = [SplitKind::Unknown];
    let train = build_frame_dataset(&set.train, oracle, &cfg.grid, &positive, cfg.uoi_frames_per_class, seed)?;
    let held = build_frame_dataset(&set.held_out, oracle, &cfg.grid, &positive, cfg.held_out_frames_per_class, seed ^ 1)?;
    let p = &cfg.perception;
    let mut uoi = Uoi::new(seed, p.d_g, p.dim, bank.len(), cfg.uoi)?;
    let pc = PretrainConfig { seed, ..cfg.uoi_pretrain };
    let classes: Vec<ClassId> = set.split.unknown.iter().map(|c| c.id).collect();
    let report = pretrain(&mut uoi, bank, &classes, &train, &held, &pc)?;
    Ok((uoi, report))
}

/// Per-pose perception that does not depend on pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCore {
    /// Flattened observation map, `1 × d_g·D`.
    pub obs: Matrix,
    pub uoi: UoiOutput,
}

/// Everything the agent perceives at one state.
#[derive(Debug, Clone)]
pub struct View {
    pub frame: Frame,
    pub detections: Vec<Detection>,
    /// Ground truth for the identifier bit: the unlabeled target is in view,
    /// or for known targets any unlabeled object is.
    pub gt_cls: bool,
    pub core: Rc<ViewCore>,
}

/// Scene id, cell, heading and the unlabeled target the bank was built for.
type CacheKey = (u64, usize, usize, usize, Option<ClassId>);

/// Scenes plus the frozen perception stack.
#[derive(Debug)]
pub struct World {
    pub config: WorldConfig,
    pub scenes: SceneSet,
    pub oracle: ClassFeatureOracle,
    pub tfg: Tfg,
    /// Generated maps of the unknown classes.
    pub bank: Vec<Matrix>,
    pub uoi: Uoi,
    target_banks: BTreeMap<ClassId, Vec<Matrix>>,
    cache: RefCell<HashMap<CacheKey, Rc<ViewCore>>>,
}

/// Artifacts of the pretraining stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReports {
    pub tfg: TfgReport,
    pub uoi: PretrainReport,
}

impl World {
    pub fn new(config: WorldConfig, scenes: SceneSet, oracle: ClassFeatureOracle, tfg: Tfg, uoi: Uoi) -> Result<Self> {
        config.validate()?;
        let split = &scenes.split;
        let bank = feature_bank(&tfg, split)?;
        if uoi.bank_size() != bank.len() {
            return Err(MetaError::Config("identifier bank size does not match the unknown classes".into()));
        }
        let mut target_banks = BTreeMap::new();
        for c in split.unknown.iter().chain(&split.unseen) {
            let g = tfg.generate(&class_attributes(split, c.id)?)?;
            target_banks.insert(c.id, vec![g; bank.len()]);
        }
        Ok(Self { config, scenes, oracle, tfg, bank, uoi, target_banks, cache: RefCell::new(HashMap::new()) })
    }

    /// Runs every stage from scene generation through identifier pretraining.
    pub fn build(seed: u64, config: WorldConfig) -> Result<(Self, PretrainReports)> {
        let scenes = gen_scenes(seed, &config)?;
        let oracle = build_oracle(&scenes, &config)?;
        let (tfg, tfg_report) = pretrain_tfg(&scenes, &oracle, &config)?;
        let bank = feature_bank(&tfg, &scenes.split)?;
        let (uoi, uoi_report) = pretrain_uoi(&scenes, &oracle, &bank, &config)?;
        let world = Self::new(config, scenes, oracle, tfg, uoi)?;
        Ok((world, PretrainReports { tfg: tfg_report, uoi: uoi_report }))
    }

    /// Bank the identifier compares against: the unknown-class maps for
    /// known targets, the target's own generated map for unlabeled ones.
    pub fn bank_for(&self, target: &Target) -> Result<&[Matrix]> {
        match target.kind {
            TargetKind::Known => Ok(&self.bank),
            TargetKind::Unlabeled => self
                .target_banks
                .get(&target.class)
                .map(Vec::as_slice)
                .ok_or(MetaError::Grid(GridError::UnknownClass(target.class))),
        }
    }

    pub fn split(&self) -> &ClassSplit {
        &self.scenes.split
    }

    pub fn grid(&self) -> &GridConfig {
        &self.config.grid
    }

    pub fn view(&self, scene: &Scene, state: AgentState, target: &Target) -> Result<View> {
        let frame = observe(scene, state, &self.config.grid);
        let tag = (target.kind == TargetKind::Unlabeled).then_some(target.class);
        let key = (scene.id(), state.x, state.y, state.heading.index(), tag);
        let cached = self.cache.borrow().get(&key).cloned();
        let core = match cached {
            Some(c) => c,
            None => {
                let f_o = self.oracle.observation_features(&frame)?;
                let uoi = self.uoi.forward(&f_o, self.bank_for(target)?)?;
                let n = f_o.len();
                let c = Rc::new(ViewCore { obs: f_o.reshape(1, n)?, uoi });
                self.cache.borrow_mut().insert(key, c.clone());
                c
            }
        };
        let split = scene.split();
        let detections = self.oracle.detect_known(&frame, split)?;
        let gt_cls = match target.kind {
            TargetKind::Known => frame.objects.iter().any(|o| split.is_unlabeled(o.class)),
            TargetKind::Unlabeled => frame.contains_class(target.class),
        };
        Ok(View { frame, detections, gt_cls, core })
    }
}
