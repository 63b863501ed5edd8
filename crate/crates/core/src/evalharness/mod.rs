//! Success metrics, split-wise evaluation, baselines, ablation presets and
//! report emission.

mod flags;
mod report;

pub use flags::{AblationFlags, PRESETS};
pub use report::{
    ablation_matrix, ablation_table, check_checkpoint, distance_table, eval_splits, gt_cls_table, mean_std,
    plain_baseline, random_report, split_episodes, split_table, traces_jsonl, train_agent, AblationReport, RunConfig,
    RunReport, SeedRun, SplitSummary, StratumRow, TraceLine,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{generate_episode, step, success, Action, EpisodeSpec, SceneKind, SplitKind};
use crate::metatrain::{run_episode, Agent, MetaError, Mode, StepRecord, World};
use crate::seeding;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no episodes to score")]
    Empty,
    #[error("episode {0} has no shortest-path length")]
    MissingShortest(usize),
    #[error("invalid ablation flags: {0}")]
    Flags(String),
    #[error("checkpoint does not match the configuration: {0}")]
    Mismatch(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
}

impl From<crate::gridworld::GridError> for EvalError {
    fn from(e: crate::gridworld::GridError) -> Self {
        EvalError::Meta(e.into())
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Steps taken, Done included.
    pub steps: usize,
    /// Shortest-path length, Done included.
    pub shortest: Option<usize>,
    pub split: SplitKind,
    pub seed: u64,
}

pub fn metric_sr(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

pub fn metric_spl(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for (i, r) in results.iter().enumerate() {
        let opt = r.shortest.ok_or(EvalError::MissingShortest(i))?;
        if r.success {
            total += opt as f64 / r.steps.max(opt) as f64;
        }
    }
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    /// Episodes with `L* ≥ min_shortest`.
    pub min_shortest: usize,
    pub count: usize,
    pub sr: f64,
    pub spl: f64,
}

/// SR and SPL over episodes with `L* ≥ t` for each threshold. Empty strata
/// are `None`.
pub fn distance_stratified(results: &[EpisodeResult], thresholds: &[usize]) -> Result<Vec<(usize, Option<Stratum>)>> {
    for (i, r) in results.iter().enumerate() {
        if r.shortest.is_none() {
            return Err(EvalError::MissingShortest(i));
        }
    }
    thresholds
        .iter()
        .map(|&t| {
            let sub: Vec<EpisodeResult> = results.iter().copied().filter(|r| r.shortest.unwrap_or(0) >= t).collect();
            if sub.is_empty() {
                return Ok((t, None));
            }
            Ok((t, Some(Stratum { min_shortest: t, count: sub.len(), sr: metric_sr(&sub)?, spl: metric_spl(&sub)? })))
        })
        .collect()
}

/// Evaluation episodes for one split on the test scenes, cycling through
/// scenes in order.
pub fn eval_episodes(world: &World, split: SplitKind, n: usize, seed: u64) -> Result<Vec<EpisodeSpec>> {
    let scenes = &world.scenes.test;
    let pool = world.split().ids(split);
    let mut out = Vec::with_capacity(n);
    let mut idx = 0usize;
    let mut misses = 0usize;
    while out.len() < n {
        let scene = idx % scenes.len();
        let s = seeding::derive(seed, &[seeding::tag("eval"), split as u64, idx as u64]);
        idx += 1;
        match generate_episode(s, scene, &scenes[scene], &pool, world.config.min_shortest, world.grid()) {
            Ok(spec) => {
                out.push(spec);
                misses = 0;
            }
            Err(e) => {
                misses += 1;
                if misses > scenes.len() {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(out)
}

/// Greedy inference over `episodes`. Inner-loop adaptation follows the
/// agent's flags.
pub fn evaluate_agent(
    world: &World,
    agent: &Agent,
    episodes: &[EpisodeSpec],
    seed: u64,
    mut traces: Option<&mut Vec<Vec<StepRecord>>>,
) -> Result<Vec<EpisodeResult>> {
    agent.check_world(world)?;
    let mut out = Vec::with_capacity(episodes.len());
    for (i, spec) in episodes.iter().enumerate() {
        let s = seeding::derive(seed, &[seeding::tag("eval-episode"), i as u64]);
        let mut rng = seeding::rng(s);
        let run = run_episode(world, agent, spec, SceneKind::Test, s, Mode::Inference, &mut rng)?;
        if let Some(t) = traces.as_deref_mut() {
            t.push(run.trace.clone());
        }
        out.push(run.result);
    }
    Ok(out)
}

pub fn random_action<R: Rng + ?Sized>(rng: &mut R) -> Action {
    Action::ALL[rng.random_range(0..Action::COUNT)]
}

/// Uniform random walk that stops when it happens to draw Done.
pub fn random_policy(world: &World, episodes: &[EpisodeSpec], seed: u64) -> Result<Vec<EpisodeResult>> {
    let mut out = Vec::with_capacity(episodes.len());
    for (i, spec) in episodes.iter().enumerate() {
        let s = seeding::derive(seed, &[seeding::tag("random-episode"), i as u64]);
        let mut rng = seeding::rng(s);
        let scene = &world.scenes.test[spec.scene];
        let mut state = spec.start;
        let mut ok = false;
        let mut steps = 0;
        for t in 0..spec.max_steps {
            let a = random_action(&mut rng);
            steps = t + 1;
            if a == Action::Done {
                ok = success(scene, state, &spec.target, true, steps, world.grid());
                break;
            }
            state = step(scene, state, a)?.state;
        }
        out.push(EpisodeResult { success: ok, steps, shortest: Some(spec.shortest), split: spec.split, seed: s });
    }
    Ok(out)
}
