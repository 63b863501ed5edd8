use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Uoi, UoiError};
use crate::gridworld::{observe, AgentState, ClassId, GridConfig, Heading, Pitch, Scene, SplitKind};
use crate::numerics::{Adam, Matrix};
use crate::perception::ClassFeatureOracle;
use crate::seeding;

/// One labelled observation map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    pub f_o: Matrix,
    pub gt: bool,
    /// Visible classes from the positive splits.
    pub visible: Vec<ClassId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Pair every sample with a random multiset of bank classes and label
    /// it by whether any of them is visible. Held-out samples get one fixed
    /// draw each.
    pub mixed_banks: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 2e-3, batch: 16, seed: 0, mixed_banks: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Held-out identification accuracy after each epoch.
    pub isr: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// Balanced set of distinct frames from `scenes`. The label marks frames
/// showing an object whose class is in `positive`.
pub fn build_frame_dataset(
    scenes: &[Scene],
    oracle: &ClassFeatureOracle,
    grid: &GridConfig,
    positive: &[SplitKind],
    per_class: usize,
    seed: u64,
) -> Result<Vec<FrameSample>> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for scene in scenes {
        for (x, y) in scene.walkable_cells() {
            for h in Heading::ALL {
                let frame = observe(scene, AgentState::new(x, y, h, Pitch::Level), grid);
                let mut visible: Vec<ClassId> = frame
                    .objects
                    .iter()
                    .map(|o| o.class)
                    .filter(|c| scene.split().kind_of(*c).is_some_and(|k| positive.contains(&k)))
                    .collect();
                visible.sort();
                visible.dedup();
                let label = !visible.is_empty();
                let sample = FrameSample { f_o: oracle.observation_features(&frame)?, gt: label, visible };
                if label {
                    pos.push(sample);
                } else {
                    neg.push(sample);
                }
            }
        }
    }
    let mut rng = seeding::rng_for(seed, "frames", 0);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n = per_class.min(pos.len()).min(neg.len());
    let mut out: Vec<FrameSample> = pos.into_iter().take(n).chain(neg.into_iter().take(n)).collect();
    out.shuffle(&mut rng);
    if out.is_empty() {
        return Err(UoiError::EmptyDataset);
    }
    Ok(out)
}

/// Index of the largest value; the earliest wins ties.
pub fn select_epoch(isr: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in isr.iter().enumerate() {
        if best.is_none_or(|b| *v > isr[b]) {
            best = Some(i);
        }
    }
    best
}

/// Bank and label for one sample. Mixed draws are a single class repeated
/// half the time and a uniform multiset otherwise.
fn draw_bank<R: Rng>(
    rng: &mut R,
    bank: &[Matrix],
    bank_classes: &[ClassId],
    sample: &FrameSample,
    mixed: bool,
) -> (Vec<Matrix>, bool) {
    if !mixed {
        return (bank.to_vec(), sample.gt);
    }
    let n = bank.len();
    let pick: Vec<usize> = if rng.random_bool(0.5) {
        vec![rng.random_range(0..n); n]
    } else {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    };
    let gt = pick.iter().any(|&j| sample.visible.contains(&bank_classes[j]));
    (pick.iter().map(|&j| bank[j].clone()).collect(), gt)
}

fn accuracy(uoi: &Uoi, set: &[FrameSample], banks: &[(Vec<Matrix>, bool)]) -> Result<f64> {
    let mut hits = 0usize;
    for (s, (bank, gt)) in set.iter().zip(banks) {
        if uoi.forward(&s.f_o, bank)?.cls == *gt {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Mini-batch Adam on the presence loss. `bank_classes[i]` is the class
/// behind `bank[i]`. Keeps the weights of the epoch with the best held-out
/// accuracy.
pub fn pretrain(
    uoi: &mut Uoi,
    bank: &[Matrix],
    bank_classes: &[ClassId],
    train: &[FrameSample],
    held_out: &[FrameSample],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if train.is_empty() || held_out.is_empty() {
        return Err(UoiError::EmptyDataset);
    }
    if bank_classes.len() != bank.len() {
        return Err(UoiError::BankSize { expected: bank.len(), got: bank_classes.len() });
    }
    let mut held_rng = seeding::rng_for(cfg.seed, "uoi-held-out", 0);
    let held_banks: Vec<(Vec<Matrix>, bool)> =
        held_out.iter().map(|s| draw_bank(&mut held_rng, bank, bank_classes, s, cfg.mixed_banks)).collect();
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    let mut isr = Vec::new();
    let mut snapshots = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = seeding::rng_for(cfg.seed, "uoi-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let banks: Vec<(Vec<Matrix>, bool)> =
                chunk.iter().map(|&i| draw_bank(&mut rng, bank, bank_classes, &train[i], cfg.mixed_banks)).collect();
            let batch: Vec<(&Matrix, &[Matrix], bool)> =
                chunk.iter().zip(&banks).map(|(&i, (b, gt))| (&train[i].f_o, b.as_slice(), *gt)).collect();
            let (l, g) = uoi.loss_and_grads(uoi.params(), &batch)?;
            total += l * chunk.len() as f64;
            adam.step(uoi.params_mut(), &g)?;
        }
        losses.push(total / train.len() as f64);
        isr.push(accuracy(uoi, held_out, &held_banks)?);
        snapshots.push(uoi.params().clone());
    }
    let best = select_epoch(&isr).ok_or(UoiError::EmptyDataset)?;
    *uoi.params_mut() = snapshots.swap_remove(best);
    Ok(PretrainReport { losses, isr, best_epoch: best + 1 })
}
