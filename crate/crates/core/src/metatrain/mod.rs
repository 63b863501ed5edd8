//! Episodic meta-training: task-local copies of the modifier and graph
//! weights adapted every step, first-order outer updates of the graph and
//! policy weights, checkpoints and schedule auditing.

mod world;

pub use world::{
    build_oracle, feature_bank, gen_scenes, pretrain_tfg, pretrain_uoi, PretrainReports, SceneSet, View, ViewCore, World,
    WorldConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evalharness::{AblationFlags, EpisodeResult};
use crate::gridworld::{
    generate_episode, step, success, Action, EpisodeSpec, GridError, Scene, SceneKind, SplitKind, TargetKind,
};
use crate::mcfm::{self, ClassFeatureBuffer, CooccurrenceSets, McfmError, McfmInputs};
use crate::mogl::{self, build_graph, AugmentationSpec, CoVisibilityLog, MoglError};
use crate::numerics::{sgd_step, Adam, Grads, Group, Matrix, NumericsError, ParamStore, Tape};
use crate::perception::PerceptionError;
use crate::policy::{
    self, a3c_on_tape, a3c_step_terms, build_ti, done_reminder, greedy, policy_step_on_tape, probabilities, sample,
    PolicyConfig, PolicyDims, PolicyError, StepContext, StepInput, Transition, ZrInput, ZrSource,
};
use crate::seeding;
use crate::uoi::UoiError;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("outer update needs at least one task")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Uoi(#[from] UoiError),
    #[error(transparent)]
    Mcfm(#[from] McfmError),
    #[error(transparent)]
    Mogl(#[from] MoglError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, MetaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner step size of the modifier weights.
    pub lambda1: f64,
    /// Inner step size of the graph weights.
    pub lambda2: f64,
    /// Outer step size.
    pub mu: f64,
    pub task_batch: usize,
    /// Training episode budget.
    pub episodes: usize,
    pub optimizer: OptimizerKind,
    /// Global norm clip on summed outer gradients; 0 disables clipping.
    pub grad_clip: f64,
    pub eta: f64,
    pub augmentation: AugmentationSpec,
    /// Width of the graph embedding.
    pub d_out: usize,
    /// Probability that a training episode has an unknown-object target
    /// when those are enabled.
    pub unlabeled_fraction: f64,
    /// Probability of an unseen-object target episode on a test scene.
    /// Zero outside schedule audits.
    pub unseen_fraction: f64,
    /// Initial upper bound on the shortest-path length of training
    /// episodes; 0 means no bound.
    pub curriculum_start: usize,
    /// Episodes per unit increase of that bound.
    pub curriculum_step: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-4,
            lambda2: 1e-4,
            mu: 3e-4,
            task_batch: 4,
            episodes: 50_000,
            optimizer: OptimizerKind::Adam,
            grad_clip: 10.0,
            eta: 1e-3,
            augmentation: AugmentationSpec::default(),
            d_out: 16,
            unlabeled_fraction: 0.5,
            unseen_fraction: 0.0,
            curriculum_start: 4,
            curriculum_step: 2000,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(MetaError::Config(what.to_string()));
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0 && self.mu > 0.0) {
            return bad("step sizes must be positive");
        }
        if self.task_batch == 0 {
            return bad("task batch must hold at least one task");
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction)
            || !(0.0..=1.0).contains(&self.unseen_fraction)
            || self.unlabeled_fraction + self.unseen_fraction > 1.0
        {
            return bad("episode fractions must lie in [0, 1] and sum to at most 1");
        }
        if self.grad_clip < 0.0 || self.eta < 0.0 {
            return bad("clip and eta must be non-negative");
        }
        self.augmentation.validate()?;
        Ok(())
    }
}

/// `λ1·L_mcfm + λ2·L_cca + μ·L_a3c`.
pub fn total_loss(l_mcfm: f64, l_cca: f64, l_a3c: f64, lambda1: f64, lambda2: f64, mu: f64) -> f64 {
    lambda1 * l_mcfm + lambda2 * l_cca + mu * l_a3c
}

/// Hex SHA-256 of a parameter store's byte encoding.
pub fn param_hash(store: &ParamStore) -> String {
    hex::encode(Sha256::digest(store.to_bytes()))
}

/// Global parameters plus everything needed to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub flags: AblationFlags,
    pub policy: PolicyConfig,
    pub meta: MetaConfig,
    pub dims: PolicyDims,
    pub params: ParamStore,
}

impl Agent {
    pub fn new(seed: u64, world: &World, flags: AblationFlags, policy: PolicyConfig, meta: MetaConfig) -> Result<Self> {
        flags.validate().map_err(|e| MetaError::Config(e.to_string()))?;
        meta.validate()?;
        let split = world.split();
        let p = &world.config.perception;
        let zr = if flags.use_mogl {
            ZrSource::Graph { nodes: split.num_known() + 1, width: meta.d_out }
        } else if flags.use_tfg_uoi {
            ZrSource::Feature { width: world.config.uoi.d_f }
        } else {
            ZrSource::None
        };
        let dims = PolicyDims { obs: p.d_g * p.dim, ti: split.num_known() + 1 + split.vocabulary.len(), zr };
        let mut rng = seeding::rng_for(seed, "agent-init", 0);
        let mut params = ParamStore::new();
        mcfm::init_params(&mut params, &mut rng, world.config.uoi.d_f)?;
        mogl::init_params(&mut params, &mut rng, world.config.uoi.d_f, meta.d_out)?;
        policy::init_params(&mut params, &mut rng, &policy, &dims)?;
        Ok(Self { flags, policy, meta, dims, params })
    }

    /// Checks that this agent fits `world`.
    pub fn check_world(&self, world: &World) -> Result<()> {
        let split = world.split();
        let p = &world.config.perception;
        let ti = split.num_known() + 1 + split.vocabulary.len();
        if self.dims.obs != p.d_g * p.dim || self.dims.ti != ti {
            return Err(MetaError::Config("agent dimensions do not match the world".into()));
        }
        Ok(())
    }

    pub fn group_hashes(&self) -> GroupHashes {
        GroupHashes {
            alpha: param_hash(&self.params.group(Group::Alpha)),
            beta: param_hash(&self.params.group(Group::Beta)),
            psi: param_hash(&self.params.group(Group::Psi)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupHashes {
    pub alpha: String,
    pub beta: String,
    pub psi: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Inference,
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: crate::gridworld::AgentState,
    pub action: Action,
    pub cls: bool,
    pub cls_prob: f64,
    pub reward: f64,
    pub l_mcfm: Option<f64>,
    pub l_cca: Option<f64>,
    pub l_a3c: f64,
    pub total: f64,
    /// The modifier copy took an inner step.
    pub mcfm_step: bool,
    /// The graph copy took an inner step.
    pub mogl_step: bool,
}

/// One episode treated as a task.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub spec: EpisodeSpec,
    pub scene_kind: SceneKind,
    pub seed: u64,
    pub mode: Mode,
    pub alpha_i: ParamStore,
    pub beta_i: ParamStore,
    pub trace: Vec<StepRecord>,
    /// Policy inputs, kept in training mode for gradient replay.
    pub inputs: Vec<StepInput>,
    /// Actor-critic gradients at the adapted parameters (β and ψ).
    pub a3c_grads: Grads,
    /// Summed auxiliary-loss gradients when meta-learning is off.
    pub alpha_loss_grads: Grads,
    pub beta_loss_grads: Grads,
    pub result: EpisodeResult,
    pub l_a3c: f64,
}

impl TaskRun {
    pub fn episode_return(&self) -> f64 {
        self.trace.iter().map(|s| s.reward).sum()
    }
}

const CURRICULUM_TRIES: usize = 64;

pub const SUCCESS_REWARD: f64 = 5.0;
pub const STEP_PENALTY: f64 = -0.01;

fn add_into(acc: &mut Grads, name: &str, g: &Matrix) -> Result<()> {
    match acc.get_mut(name) {
        Some(a) => a.axpy(1.0, g)?,
        None => {
            acc.insert(name.to_string(), g.clone());
        }
    }
    Ok(())
}

fn merge(acc: &mut Grads, g: &Grads) -> Result<()> {
    for (k, v) in g {
        add_into(acc, k, v)?;
    }
    Ok(())
}

/// Observe, identify, adapt the modifier (identifier fired on an
/// unlabeled-target episode), adapt the graph weights, act. Repeats until Done
/// or the step cap.
pub fn run_episode<R: Rng + ?Sized>(
    world: &World,
    agent: &Agent,
    spec: &EpisodeSpec,
    scene_kind: SceneKind,
    seed: u64,
    mode: Mode,
    rng: &mut R,
) -> Result<TaskRun> {
    let scene: &Scene = world
        .scenes
        .scenes(scene_kind)
        .get(spec.scene)
        .ok_or_else(|| MetaError::Config(format!("scene index {} out of range", spec.scene)))?;
    let flags = agent.flags;
    let meta = &agent.meta;
    let train = mode == Mode::Train;
    let split = world.split();
    let known = split.ids(SplitKind::Known);
    let unlabeled = spec.target.kind == TargetKind::Unlabeled;
    let mcfm_active = flags.use_mcfm && flags.mcfm_loss_on;
    let cca_active = flags.use_mogl && flags.cca_loss_on;

    let mut alpha_i = agent.params.group(Group::Alpha);
    let mut beta_i = agent.params.group(Group::Beta);
    let mut alpha_loss_grads = Grads::new();
    let mut beta_loss_grads = Grads::new();
    let mut buffer = ClassFeatureBuffer::new();
    let mut log = CoVisibilityLog::new(&known);
    let ti = build_ti(split, &spec.target)?;

    let psi = agent.params.group(Group::Psi);
    let mut tape = Tape::new();
    let bound = if train { psi.bind(&mut tape) } else { psi.bind_filtered(&mut tape, |_| false) };
    let mut ctx = StepContext::fresh(&mut tape, agent.policy.hidden);

    let mut state = spec.start;
    let mut prev = None;
    let mut traj = Vec::new();
    let mut trace = Vec::new();
    let mut inputs = Vec::new();
    let mut succeeded = false;
    for t in 0..spec.max_steps {
        let view = world.view(scene, state, &spec.target)?;
        let cls = flags.use_tfg_uoi && if flags.use_gt_cls { view.gt_cls } else { view.core.uoi.cls };
        let f_t = &view.core.uoi.f_t;
        buffer.observe(&view.detections);
        log.record(&view.frame, cls, world.config.covis_radius);

        let mut l_mcfm = None;
        let mut mcfm_step = false;
        if mcfm_active && cls && unlabeled {
            let sets = CooccurrenceSets::build(cls, &view.detections, &known);
            if let Some(inp) = McfmInputs::assemble(&sets, &buffer, &view.detections, f_t) {
                if flags.mcfm_meta_on {
                    l_mcfm = Some(mcfm::inner_update(&mut alpha_i, cls, &inp, meta.lambda1)?);
                    mcfm_step = true;
                } else if train {
                    let (l, g) = mcfm::loss_and_grads(&alpha_i, &inp)?;
                    merge(&mut alpha_loss_grads, &g)?;
                    l_mcfm = Some(l);
                }
            }
        }
        let f_t_mod = if flags.use_mcfm { mcfm::modify_ft(f_t, &alpha_i)? } else { f_t.clone() };

        let mut l_cca = None;
        let mut mogl_step = false;
        let zr = if flags.use_mogl {
            let g = build_graph(&buffer, &f_t_mod, &log)?;
            if cca_active && (flags.mogl_meta_on || train) {
                let aug_seed = seeding::derive(seed, &[seeding::tag("augment"), t as u64]);
                let (va, vb) = mogl::augment(&g, &meta.augmentation, aug_seed)?;
                if flags.mogl_meta_on {
                    l_cca = Some(mogl::inner_update_beta(&mut beta_i, &va, &vb, meta.eta, meta.lambda2)?);
                    mogl_step = true;
                } else {
                    let (l, gr) = mogl::loss_and_grads(&beta_i, &va, &vb, meta.eta)?;
                    merge(&mut beta_loss_grads, &gr)?;
                    l_cca = Some(l);
                }
            }
            ZrInput::Graph { e: g.e, v: g.v, wg: beta_i.get(mogl::WG)?.clone() }
        } else if flags.use_tfg_uoi {
            ZrInput::Feature(f_t_mod)
        } else {
            ZrInput::None
        };

        let input = StepInput {
            obs: view.core.obs.clone(),
            ti: ti.clone(),
            zr,
            prev_action: prev,
            reminder: done_reminder(&view.detections, cls, &spec.target),
        };
        let (vars, next) = policy_step_on_tape(&mut tape, &bound, &agent.policy, &input, ctx, train && flags.use_mogl)?;
        ctx = next;
        let probs = probabilities(&tape, &vars);
        let action = if train { sample(&probs, rng) } else { greedy(&probs) };
        let out = step(scene, state, action)?;
        let done = action == Action::Done;
        let ok = done && success(scene, state, &spec.target, true, t + 1, world.grid());
        let reward = STEP_PENALTY + if ok { SUCCESS_REWARD } else { 0.0 };
        traj.push(Transition { vars, action, reward });
        trace.push(StepRecord {
            step: t,
            state,
            action,
            cls,
            cls_prob: view.core.uoi.cls_prob,
            reward,
            l_mcfm,
            l_cca,
            l_a3c: 0.0,
            total: 0.0,
            mcfm_step,
            mogl_step,
        });
        if train {
            inputs.push(input);
        }
        state = out.state;
        prev = Some(action);
        if done {
            succeeded = ok;
            break;
        }
    }

    let scalars: Vec<(f64, f64, f64, f64)> = traj
        .iter()
        .map(|tr| {
            let lps = tape.value(tr.vars.log_probs).row(0);
            let h = -lps.iter().map(|l| l.exp() * l).sum::<f64>();
            (lps[tr.action.index()], tape.scalar(tr.vars.value), tr.reward, h)
        })
        .collect();
    let pc = &agent.policy;
    let terms = a3c_step_terms(&scalars, pc.gamma, pc.value_coef, pc.entropy_coef)?;
    for (rec, term) in trace.iter_mut().zip(&terms) {
        rec.l_a3c = *term;
        rec.total = total_loss(rec.l_mcfm.unwrap_or(0.0), rec.l_cca.unwrap_or(0.0), *term, meta.lambda1, meta.lambda2, meta.mu);
    }
    let l_a3c = terms.iter().sum();

    let mut a3c_grads = Grads::new();
    if train {
        let loss = a3c_on_tape(&mut tape, &traj, pc, None)?;
        let g = tape.backward(loss)?;
        a3c_grads = bound.collect(&g);
        if flags.use_mogl {
            let wg = beta_i.get(mogl::WG)?;
            let mut acc = Matrix::zeros(wg.rows(), wg.cols());
            for tr in &traj {
                if let Some(gw) = tr.vars.wg.and_then(|v| g.get(v)) {
                    acc.axpy(1.0, gw)?;
                }
            }
            a3c_grads.insert(mogl::WG.to_string(), acc);
        }
    }

    let result = EpisodeResult {
        success: succeeded,
        steps: trace.len(),
        shortest: Some(spec.shortest),
        split: spec.split,
        seed,
    };
    Ok(TaskRun {
        spec: spec.clone(),
        scene_kind,
        seed,
        mode,
        alpha_i,
        beta_i,
        trace,
        inputs,
        a3c_grads,
        alpha_loss_grads,
        beta_loss_grads,
        result,
        l_a3c,
    })
}

/// Recomputes the actor-critic gradients of a training-mode task from its
/// recorded inputs and actions at the global policy weights.
pub fn replay_grads(agent: &Agent, task: &TaskRun) -> Result<Grads> {
    if task.inputs.is_empty() {
        return Err(MetaError::Config("task has no recorded inputs".into()));
    }
    let psi = agent.params.group(Group::Psi);
    let mut tape = Tape::new();
    let bound = psi.bind(&mut tape);
    let mut ctx = StepContext::fresh(&mut tape, agent.policy.hidden);
    let mut traj = Vec::new();
    for (inp, rec) in task.inputs.iter().zip(&task.trace) {
        let (vars, next) = policy_step_on_tape(&mut tape, &bound, &agent.policy, inp, ctx, agent.flags.use_mogl)?;
        ctx = next;
        traj.push(Transition { vars, action: rec.action, reward: rec.reward });
    }
    let loss = a3c_on_tape(&mut tape, &traj, &agent.policy, None)?;
    let g = tape.backward(loss)?;
    let mut out = bound.collect(&g);
    if agent.flags.use_mogl {
        let mut acc: Option<Matrix> = None;
        for tr in &traj {
            if let Some(gw) = tr.vars.wg.and_then(|v| g.get(v)) {
                match &mut acc {
                    Some(a) => a.axpy(1.0, gw)?,
                    None => acc = Some(gw.clone()),
                }
            }
        }
        let wg = agent.params.get(mogl::WG)?;
        out.insert(mogl::WG.to_string(), acc.unwrap_or_else(|| Matrix::zeros(wg.rows(), wg.cols())));
    }
    Ok(out)
}

/// Outer-loop optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterOptimizer {
    pub kind: OptimizerKind,
    pub adam: Adam,
}

impl OuterOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, adam: Adam::new(lr) }
    }
}

fn clip(grads: &mut Grads, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
}

/// Steps global β and ψ on the actor-critic gradients summed over the batch.
/// Unseen-target tasks contribute nothing to ψ. Global α only moves when
/// the modifier is trained without meta-learning.
pub fn outer_update(agent: &mut Agent, batch: &[TaskRun], opt: &mut OuterOptimizer) -> Result<()> {
    if batch.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    if batch.iter().any(|t| t.mode != Mode::Train) {
        return Err(MetaError::Config("outer updates only use training-mode tasks".into()));
    }
    let mut sum = Grads::new();
    let mut alpha_aux = Grads::new();
    let mut beta_aux = Grads::new();
    for task in batch {
        for (name, g) in &task.a3c_grads {
            let group = agent.params.iter().find(|(n, _)| n == name).map(|(_, p)| p.group);
            match group {
                Some(Group::Psi) if task.spec.split == SplitKind::Unseen => {}
                Some(Group::Psi | Group::Beta) => add_into(&mut sum, name, g)?,
                _ => return Err(MetaError::Config(format!("unexpected outer gradient {name}"))),
            }
        }
        merge(&mut alpha_aux, &task.alpha_loss_grads)?;
        merge(&mut beta_aux, &task.beta_loss_grads)?;
    }
    clip(&mut sum, agent.meta.grad_clip);
    let (mu, l1, l2) = (agent.meta.mu, agent.meta.lambda1, agent.meta.lambda2);
    match opt.kind {
        OptimizerKind::Sgd => step_subset(&mut agent.params, &sum, |p, g| sgd_step(p, g, mu))?,
        OptimizerKind::Adam => step_subset(&mut agent.params, &sum, |p, g| opt.adam.step(p, g))?,
    }
    step_subset(&mut agent.params, &alpha_aux, |p, g| sgd_step(p, g, l1))?;
    step_subset(&mut agent.params, &beta_aux, |p, g| sgd_step(p, g, l2))?;
    Ok(())
}

fn step_subset(
    params: &mut ParamStore,
    grads: &Grads,
    f: impl FnOnce(&mut ParamStore, &Grads) -> std::result::Result<(), NumericsError>,
) -> Result<()> {
    if grads.is_empty() {
        return Ok(());
    }
    let mut sub = params.subset(grads.keys().map(String::as_str))?;
    f(&mut sub, grads)?;
    params.overwrite(&sub)?;
    Ok(())
}

/// Per-episode training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub index: usize,
    pub split: SplitKind,
    pub success: bool,
    pub steps: usize,
    pub ret: f64,
    pub l_a3c: f64,
}

/// Schedule evidence for one task: which steps adapted the modifier, with
/// the identifier bit, and global hashes around its outer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub index: usize,
    pub split: SplitKind,
    pub target: TargetKind,
    pub mcfm_steps: Vec<usize>,
    pub cls_steps: Vec<usize>,
    pub mogl_steps: usize,
    pub steps: usize,
    pub before: GroupHashes,
    pub after: GroupHashes,
    /// Index of the outer update this task fed.
    pub batch: usize,
}

/// Serializable RNG position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |w: &str| MetaError::Checkpoint(format!("bad rng {w}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub agent: Agent,
    pub optimizer: OuterOptimizer,
    pub rng: RngState,
    pub episodes_done: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| MetaError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| MetaError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(MetaError::Checkpoint(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

/// Drives training episodes and outer updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub seed: u64,
    pub agent: Agent,
    pub optimizer: OuterOptimizer,
    rng: ChaCha8Rng,
    pub episodes_done: usize,
    batches_done: usize,
}

impl Trainer {
    pub fn new(seed: u64, agent: Agent) -> Self {
        let optimizer = OuterOptimizer::new(agent.meta.optimizer, agent.meta.mu);
        Self { seed, agent, optimizer, rng: seeding::rng_for(seed, "trainer", 0), episodes_done: 0, batches_done: 0 }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            agent: self.agent.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            episodes_done: self.episodes_done,
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        let task_batch = c.agent.meta.task_batch;
        Ok(Self {
            seed: c.seed,
            agent: c.agent,
            optimizer: c.optimizer,
            rng: c.rng.restore()?,
            episodes_done: c.episodes_done,
            batches_done: c.episodes_done.div_ceil(task_batch),
        })
    }

    /// Current bound on training shortest paths; 0 means none.
    pub fn shortest_cap(&self) -> usize {
        let m = &self.agent.meta;
        if m.curriculum_start == 0 {
            return 0;
        }
        m.curriculum_start + self.episodes_done / m.curriculum_step.max(1)
    }

    /// Draws the next training episode and its seed.
    pub fn next_episode(&mut self, world: &World) -> Result<(EpisodeSpec, SceneKind, u64)> {
        let seed: u64 = self.rng.random();
        let mut r = seeding::rng(seed);
        let u: f64 = r.random();
        let m = &self.agent.meta;
        let split = world.split();
        let (kind, pool) = if u < m.unseen_fraction {
            (SceneKind::Test, split.ids(SplitKind::Unseen))
        } else if self.agent.flags.use_uot && u < m.unseen_fraction + m.unlabeled_fraction {
            (SceneKind::Train, split.ids(SplitKind::Unknown))
        } else {
            (SceneKind::Train, split.ids(SplitKind::Known))
        };
        let scenes = world.scenes.scenes(kind);
        let first = r.random_range(0..scenes.len());
        let cap = self.shortest_cap();
        let mut fallback = None;
        let mut last = None;
        for k in 0..scenes.len().max(CURRICULUM_TRIES) {
            let idx = (first + k) % scenes.len();
            match generate_episode(seeding::derive(seed, &[k as u64]), idx, &scenes[idx], &pool, world.config.min_shortest, world.grid()) {
                Ok(spec) if cap == 0 || spec.shortest <= cap => return Ok((spec, kind, seed)),
                Ok(spec) => {
                    fallback.get_or_insert(spec);
                }
                Err(e) => last = Some(e),
            }
        }
        match fallback {
            Some(spec) => Ok((spec, kind, seed)),
            None => Err(last.expect("at least one scene").into()),
        }
    }

    /// Runs `episodes` more training episodes in batches of the task batch
    /// size. Pass `audit` to collect schedule evidence.
    pub fn train(&mut self, world: &World, episodes: usize, mut audit: Option<&mut Vec<AuditRecord>>) -> Result<Vec<EpisodeLog>> {
        self.agent.check_world(world)?;
        let mut logs = Vec::with_capacity(episodes);
        let mut remaining = episodes;
        while remaining > 0 {
            let n = remaining.min(self.agent.meta.task_batch);
            let before = audit.as_ref().map(|_| self.agent.group_hashes());
            let mut batch = Vec::with_capacity(n);
            for _ in 0..n {
                let (spec, kind, seed) = self.next_episode(world)?;
                let mut act = seeding::rng_for(seed, "actions", 0);
                batch.push(run_episode(world, &self.agent, &spec, kind, seed, Mode::Train, &mut act)?);
            }
            outer_update(&mut self.agent, &batch, &mut self.optimizer)?;
            if let (Some(records), Some(before)) = (audit.as_deref_mut(), before) {
                let after = self.agent.group_hashes();
                for (k, t) in batch.iter().enumerate() {
                    records.push(AuditRecord {
                        index: self.episodes_done + k,
                        split: t.spec.split,
                        target: t.spec.target.kind,
                        mcfm_steps: t.trace.iter().filter(|s| s.mcfm_step).map(|s| s.step).collect(),
                        cls_steps: t.trace.iter().filter(|s| s.cls).map(|s| s.step).collect(),
                        mogl_steps: t.trace.iter().filter(|s| s.mogl_step).count(),
                        steps: t.trace.len(),
                        before: before.clone(),
                        after: after.clone(),
                        batch: self.batches_done,
                    });
                }
            }
            for t in &batch {
                logs.push(EpisodeLog {
                    index: self.episodes_done,
                    split: t.spec.split,
                    success: t.result.success,
                    steps: t.result.steps,
                    ret: t.episode_return(),
                    l_a3c: t.l_a3c,
                });
                self.episodes_done += 1;
            }
            self.batches_done += 1;
            remaining -= n;
        }
        Ok(logs)
    }
}
