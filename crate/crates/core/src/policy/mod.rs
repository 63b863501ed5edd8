//! Recurrent actor-critic policy: target indicator, input projections,
//! LSTM core, actor and critic heads, done reminder and the actor-critic loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, ClassSplit, GridError, Target, TargetKind};
use crate::numerics::{softmax, Bound, Group, Matrix, NumericsError, ParamStore, Tape, Var};
use crate::perception::{class_attributes, Detection, PerceptionError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("policy input mismatch: {0}")]
    Input(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_z: usize,
    pub hidden: usize,
    pub gamma: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Initial actor bias on Done.
    pub done_bias: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { d_z: 32, hidden: 64, gamma: 0.99, value_coef: 0.5, entropy_coef: 0.01, done_bias: -3.0 }
    }
}

/// Where the relationship embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZrSource {
    None,
    /// Flattened GCN output of `nodes × width`.
    Graph { nodes: usize, width: usize },
    /// A single feature row of the given width.
    Feature { width: usize },
}

impl ZrSource {
    pub fn width(&self) -> usize {
        match self {
            ZrSource::None => 0,
            ZrSource::Graph { nodes, width } => nodes * width,
            ZrSource::Feature { width } => *width,
        }
    }
}

/// Input widths of the projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub obs: usize,
    pub ti: usize,
    pub zr: ZrSource,
}

impl PolicyDims {
    pub fn core_input(&self, cfg: &PolicyConfig) -> usize {
        let zr = if self.zr == ZrSource::None { 0 } else { cfg.d_z };
        2 * cfg.d_z + zr + Action::COUNT + 1
    }
}

/// Adds the ψ group (projections, LSTM, heads) to `store`.
pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &PolicyConfig, dims: &PolicyDims) -> Result<()> {
    let dz = cfg.d_z;
    let h = cfg.hidden;
    store.init(rng, "pol.fo.w", Group::Psi, dims.obs, dz)?;
    store.insert("pol.fo.b", Group::Psi, Matrix::zeros(1, dz))?;
    store.init(rng, "pol.ft.w", Group::Psi, dims.ti, dz)?;
    store.insert("pol.ft.b", Group::Psi, Matrix::zeros(1, dz))?;
    if dims.zr != ZrSource::None {
        store.init(rng, "pol.fr.w", Group::Psi, dims.zr.width(), dz)?;
        store.insert("pol.fr.b", Group::Psi, Matrix::zeros(1, dz))?;
    }
    let din = dims.core_input(cfg);
    store.init(rng, "pol.lstm.wx", Group::Psi, din, 4 * h)?;
    store.init(rng, "pol.lstm.wh", Group::Psi, h, 4 * h)?;
    let mut b = Matrix::zeros(1, 4 * h);
    for j in h..2 * h {
        b.set(0, j, 1.0);
    }
    store.insert("pol.lstm.b", Group::Psi, b)?;
    store.init(rng, "pol.actor.w", Group::Psi, h, Action::COUNT)?;
    let mut ab = Matrix::zeros(1, Action::COUNT);
    ab.set(0, Action::Done.index(), cfg.done_bias);
    store.insert("pol.actor.b", Group::Psi, ab)?;
    store.init(rng, "pol.critic.w", Group::Psi, h, 1)?;
    store.insert("pol.critic.b", Group::Psi, Matrix::zeros(1, 1))?;
    Ok(())
}

/// One-hot over `I` known classes plus an unlabeled slot, followed by the
/// target's attribute vector.
pub fn build_ti(split: &ClassSplit, target: &Target) -> Result<Matrix> {
    let i = split.num_known();
    let attrs = class_attributes(split, target.class)?;
    let mut v = vec![0.0; i + 1];
    match target.kind {
        TargetKind::Known => {
            let k = split.known_index(target.class).ok_or(GridError::UnknownClass(target.class))?;
            v[k] = 1.0;
        }
        TargetKind::Unlabeled => {
            if split.kind_of(target.class).is_none() {
                return Err(GridError::UnknownClass(target.class).into());
            }
            v[i] = 1.0;
        }
    }
    v.extend_from_slice(attrs.as_slice());
    Ok(Matrix::row_vector(v))
}

/// Set when a known target is detected, or for unlabeled targets when the
/// identifier fires.
pub fn done_reminder(detections: &[Detection], cls: bool, target: &Target) -> bool {
    match target.kind {
        TargetKind::Known => detections.iter().any(|d| d.class == target.class),
        TargetKind::Unlabeled => cls,
    }
}

/// Relationship input for one step.
#[derive(Debug, Clone, PartialEq)]
pub enum ZrInput {
    None,
    Feature(Matrix),
    /// GCN over `(E, V)` with `W^G`, recorded on the tape.
    Graph { e: Matrix, v: Matrix, wg: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    /// Flattened observation map, `1 × obs`.
    pub obs: Matrix,
    pub ti: Matrix,
    pub zr: ZrInput,
    pub prev_action: Option<Action>,
    pub reminder: bool,
}

/// Recurrent state carried within one episode.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub h: Var,
    pub c: Var,
}

impl StepContext {
    pub fn fresh(tape: &mut Tape, hidden: usize) -> Self {
        Self { h: tape.constant(Matrix::zeros(1, hidden)), c: tape.constant(Matrix::zeros(1, hidden)) }
    }
}

/// Tape handles produced by one policy step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub log_probs: Var,
    pub value: Var,
    /// The `W^G` leaf used this step, when the graph input is active.
    pub wg: Option<Var>,
}

fn proj(tape: &mut Tape, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let y = tape.affine(x, b.var(&format!("{name}.w"))?, b.var(&format!("{name}.b"))?)?;
    Ok(tape.relu(y))
}

/// Records one policy step. `train_wg` makes the graph weight a leaf so its
/// gradient can be collected.
pub fn policy_step_on_tape(
    tape: &mut Tape,
    b: &Bound,
    cfg: &PolicyConfig,
    input: &StepInput,
    ctx: StepContext,
    train_wg: bool,
) -> Result<(StepVars, StepContext)> {
    let obs = tape.constant(input.obs.clone());
    let zo = proj(tape, b, obs, "pol.fo")?;
    let ti = tape.constant(input.ti.clone());
    let zt = proj(tape, b, ti, "pol.ft")?;
    let mut parts = vec![zo, zt];
    let mut wg_var = None;
    match &input.zr {
        ZrInput::None => {}
        ZrInput::Feature(f) => {
            let f = tape.constant(f.clone());
            parts.push(proj(tape, b, f, "pol.fr")?);
        }
        ZrInput::Graph { e, v, wg } => {
            let ev = e.matmul(v)?;
            let ev = tape.constant(ev);
            let w = if train_wg { tape.leaf(wg.clone()) } else { tape.constant(wg.clone()) };
            wg_var = Some(w);
            let f = tape.matmul(ev, w)?;
            let f = tape.relu(f);
            let (r, c) = tape.value(f).shape();
            let flat = tape.reshape(f, 1, r * c)?;
            parts.push(proj(tape, b, flat, "pol.fr")?);
        }
    }
    let mut extra = vec![0.0; Action::COUNT + 1];
    if let Some(a) = input.prev_action {
        extra[a.index()] = 1.0;
    }
    extra[Action::COUNT] = if input.reminder { 1.0 } else { 0.0 };
    parts.push(tape.constant(Matrix::row_vector(extra)));
    let x = tape.concat_cols(&parts)?;
    let expected = tape.value(b.var("pol.lstm.wx")?).rows();
    if tape.value(x).cols() != expected {
        return Err(PolicyError::Input(format!("core input width {} != {expected}", tape.value(x).cols())));
    }
    let h = cfg.hidden;
    let gx = tape.matmul(x, b.var("pol.lstm.wx")?)?;
    let gh = tape.matmul(ctx.h, b.var("pol.lstm.wh")?)?;
    let g = tape.add(gx, gh)?;
    let g = tape.add_row(g, b.var("pol.lstm.b")?)?;
    let ig = tape.slice_cols(g, 0, h)?;
    let ig = tape.sigmoid(ig);
    let fg = tape.slice_cols(g, h, h)?;
    let fg = tape.sigmoid(fg);
    let gg = tape.slice_cols(g, 2 * h, h)?;
    let gg = tape.tanh(gg);
    let og = tape.slice_cols(g, 3 * h, h)?;
    let og = tape.sigmoid(og);
    let fc = tape.mul(fg, ctx.c)?;
    let ic = tape.mul(ig, gg)?;
    let c = tape.add(fc, ic)?;
    let tc = tape.tanh(c);
    let hn = tape.mul(og, tc)?;
    let logits = tape.affine(hn, b.var("pol.actor.w")?, b.var("pol.actor.b")?)?;
    let log_probs = tape.log_softmax_rows(logits);
    let value = tape.affine(hn, b.var("pol.critic.w")?, b.var("pol.critic.b")?)?;
    Ok((StepVars { log_probs, value, wg: wg_var }, StepContext { h: hn, c }))
}

/// Action probabilities from a log-probability row.
pub fn probabilities(tape: &Tape, v: &StepVars) -> Vec<f64> {
    softmax(tape.value(v.log_probs).row(0))
}

/// Highest-probability action; the lowest index wins ties.
pub fn greedy(probs: &[f64]) -> Action {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    Action::from_index(best).expect("six actions")
}

pub fn sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::from_index(i).expect("six actions");
        }
    }
    Action::from_index(probs.len() - 1).expect("six actions")
}

/// Discounted returns `R_t = r_t + γ R_{t+1}` with a zero terminal value.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One recorded transition.
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    pub vars: StepVars,
    pub action: Action,
    pub reward: f64,
}

/// Records the actor-critic loss
/// `Σ_t −log π(a_t)·A_t + c_v (R_t − V_t)² − c_e H_t`
/// with `A_t = R_t − V_t` held constant. Pass `advantages` to pin them to
/// precomputed values.
pub fn a3c_on_tape(tape: &mut Tape, traj: &[Transition], cfg: &PolicyConfig, advantages: Option<&[f64]>) -> Result<Var> {
    if traj.is_empty() {
        return Err(PolicyError::EmptyTrajectory);
    }
    let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
    let returns = discounted_returns(&rewards, cfg.gamma);
    let mut terms = Vec::with_capacity(traj.len());
    for (t, tr) in traj.iter().enumerate() {
        let v = tape.scalar(tr.vars.value);
        let adv = advantages.map_or(returns[t] - v, |a| a[t]);
        let lp = tape.pick(tr.vars.log_probs, 0, tr.action.index())?;
        let pg = tape.scale(lp, -adv);
        let ret = tape.constant(Matrix::scalar(returns[t]));
        let err = tape.sub(ret, tr.vars.value)?;
        let err = tape.square(err);
        let vl = tape.scale(err, cfg.value_coef);
        let p = tape.softmax_rows(tr.vars.log_probs);
        let plogp = tape.mul(p, tr.vars.log_probs)?;
        // Σ p log p = −H, so adding c_e·Σ p log p subtracts c_e·H.
        let neg_h = tape.sum(plogp);
        let ent = tape.scale(neg_h, cfg.entropy_coef);
        let s = tape.add(pg, vl)?;
        terms.push(tape.add(s, ent)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    Ok(total)
}

/// Per-step actor-critic terms from `(log π(a_t), V_t, r_t, H_t)` tuples.
pub fn a3c_step_terms(traj: &[(f64, f64, f64, f64)], gamma: f64, value_coef: f64, entropy_coef: f64) -> Result<Vec<f64>> {
    if traj.is_empty() {
        return Err(PolicyError::EmptyTrajectory);
    }
    let rewards: Vec<f64> = traj.iter().map(|t| t.2).collect();
    let returns = discounted_returns(&rewards, gamma);
    Ok(traj
        .iter()
        .zip(&returns)
        .map(|((lp, v, _, h), r)| {
            let adv = r - v;
            -lp * adv + value_coef * adv * adv - entropy_coef * h
        })
        .collect())
}

/// Scalar actor-critic loss: the sum of [`a3c_step_terms`].
pub fn loss_a3c(traj: &[(f64, f64, f64, f64)], gamma: f64, value_coef: f64, entropy_coef: f64) -> Result<f64> {
    Ok(a3c_step_terms(traj, gamma, value_coef, entropy_coef)?.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::seeding;
    use rand_distr::StandardNormal;

    fn split() -> ClassSplit {
        ClassSplit::toy(3, 6, 3, 2).unwrap()
    }

    #[test]
    fn target_indicator_layout() {
        let s = split();
        let k = Target { class: s.known[3].id, kind: TargetKind::Known };
        let ti = build_ti(&s, &k).unwrap();
        assert_eq!(ti.cols(), 6 + 1 + 16);
        assert_eq!(ti.get(0, 3), 1.0);
        assert_eq!(ti.data()[..7].iter().sum::<f64>(), 1.0);
        let u1 = build_ti(&s, &Target { class: s.unseen[0].id, kind: TargetKind::Unlabeled }).unwrap();
        let u2 = build_ti(&s, &Target { class: s.unseen[1].id, kind: TargetKind::Unlabeled }).unwrap();
        assert_eq!(u1.get(0, 6), 1.0);
        assert_eq!(u1.data()[..7], u2.data()[..7]);
        assert_ne!(u1.data()[7..], u2.data()[7..]);
        assert!(build_ti(&s, &Target { class: crate::gridworld::ClassId(99), kind: TargetKind::Known }).is_err());
    }

    #[test]
    fn reminder_rules() {
        let s = split();
        let det = |c: crate::gridworld::ClassId| Detection { class: c, object: 0, feature: vec![], pose: crate::perception::EgoPose([0.0; 6]) };
        let known = Target { class: s.known[0].id, kind: TargetKind::Known };
        assert!(done_reminder(&[det(s.known[0].id)], false, &known));
        assert!(!done_reminder(&[det(s.known[1].id)], true, &known));
        let unl = Target { class: s.unseen[0].id, kind: TargetKind::Unlabeled };
        assert!(!done_reminder(&[], false, &unl));
        assert!(done_reminder(&[], true, &unl));
    }

    fn tiny() -> (PolicyConfig, PolicyDims, ParamStore) {
        let cfg = PolicyConfig { d_z: 3, hidden: 4, ..PolicyConfig::default() };
        let dims = PolicyDims { obs: 5, ti: 4, zr: ZrSource::Graph { nodes: 3, width: 2 } };
        let mut p = ParamStore::new();
        init_params(&mut p, &mut seeding::rng(1), &cfg, &dims).unwrap();
        (cfg, dims, p)
    }

    fn rand_row<R: Rng>(rng: &mut R, n: usize) -> Matrix {
        Matrix::row_vector((0..n).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn inputs(seed: u64, n: usize) -> Vec<StepInput> {
        let mut rng = seeding::rng(seed);
        (0..n)
            .map(|t| {
                let v = Matrix::from_vec(3, 4, (0..12).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
                let wg = Matrix::from_vec(4, 2, (0..8).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
                StepInput {
                    obs: rand_row(&mut rng, 5),
                    ti: rand_row(&mut rng, 4),
                    zr: ZrInput::Graph { e: Matrix::filled(3, 3, 1.0 / 3.0), v, wg },
                    prev_action: if t == 0 { None } else { Some(Action::ALL[t % 6]) },
                    reminder: t % 2 == 1,
                }
            })
            .collect()
    }

    fn rollout(p: &ParamStore, cfg: &PolicyConfig, ins: &[StepInput], tape: &mut Tape) -> (Bound, Vec<Transition>) {
        let b = p.bind(tape);
        let mut ctx = StepContext::fresh(tape, cfg.hidden);
        let mut traj = Vec::new();
        for (t, inp) in ins.iter().enumerate() {
            let (vars, next) = policy_step_on_tape(tape, &b, cfg, inp, ctx, false).unwrap();
            ctx = next;
            traj.push(Transition { vars, action: Action::ALL[(t * 5 + 1) % 6], reward: [0.3, -0.01, 5.0][t % 3] });
        }
        (b, traj)
    }

    #[test]
    fn zero_actor_is_uniform_and_deterministic() {
        let (cfg, _, mut p) = tiny();
        *p.get_mut("pol.actor.w").unwrap() = Matrix::zeros(4, 6);
        *p.get_mut("pol.actor.b").unwrap() = Matrix::zeros(1, 6);
        let ins = inputs(1, 2);
        let mut tape = Tape::new();
        let (_, traj) = rollout(&p, &cfg, &ins, &mut tape);
        let probs = probabilities(&tape, &traj[1].vars);
        for q in &probs {
            assert!((q - 1.0 / 6.0).abs() < 1e-12);
        }
        let mut t2 = Tape::new();
        let (_, traj2) = rollout(&p, &cfg, &ins, &mut t2);
        assert_eq!(tape.value(traj[1].vars.value), t2.value(traj2[1].vars.value));
    }

    #[test]
    fn greedy_breaks_ties_low() {
        assert_eq!(greedy(&[0.2, 0.3, 0.3, 0.1, 0.05, 0.05]), Action::RotateLeft);
        assert_eq!(greedy(&[1.0 / 6.0; 6]), Action::MoveAhead);
    }

    #[test]
    fn closed_form_points() {
        assert_eq!(loss_a3c(&[(-1.0, 0.0, 0.0, 0.0)], 0.99, 0.5, 0.0).unwrap(), 0.0);
        let (r, v, lp) = (2.0, 0.5, -0.7);
        let l = loss_a3c(&[(lp, v, r, 0.0)], 0.0, 0.0, 0.0).unwrap();
        assert!((l - (-lp * (r - v))).abs() < 1e-15);
        assert_eq!(loss_a3c(&[], 0.99, 0.5, 0.01), Err(PolicyError::EmptyTrajectory));
    }

    #[test]
    fn tape_loss_matches_scalar_loss() {
        let (cfg, _, p) = tiny();
        let ins = inputs(4, 3);
        let mut tape = Tape::new();
        let (_, traj) = rollout(&p, &cfg, &ins, &mut tape);
        let l = a3c_on_tape(&mut tape, &traj, &cfg, None).unwrap();
        let scalars: Vec<(f64, f64, f64, f64)> = traj
            .iter()
            .map(|t| {
                let lps = tape.value(t.vars.log_probs).row(0).to_vec();
                let h = -lps.iter().map(|l| l.exp() * l).sum::<f64>();
                (lps[t.action.index()], tape.scalar(t.vars.value), t.reward, h)
            })
            .collect();
        let want = loss_a3c(&scalars, cfg.gamma, cfg.value_coef, cfg.entropy_coef).unwrap();
        assert!((tape.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (cfg, _, p) = tiny();
        let mut tape = Tape::new();
        let (_, traj) = rollout(&p, &cfg, &inputs(9, 4), &mut tape);
        for t in &traj {
            let pr = probabilities(&tape, &t.vars);
            assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(pr.iter().all(|q| *q > 0.0));
        }
    }

    #[test]
    fn first_step_ignores_previous_episode() {
        let (cfg, _, p) = tiny();
        let ins = inputs(2, 3);
        let mut tape = Tape::new();
        let (_, a) = rollout(&p, &cfg, &ins[..1], &mut tape);
        let va = tape.scalar(a[0].vars.value);
        let mut tape2 = Tape::new();
        let _ = rollout(&p, &cfg, &ins, &mut tape2);
        let (_, b) = rollout(&p, &cfg, &ins[..1], &mut tape2);
        assert_eq!(va, tape2.scalar(b[0].vars.value));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (cfg, _, p) = tiny();
            let mut p = p;
            // Perturb so every seed is a different instance.
            let mut rng = seeding::rng(seed + 7);
            let names: Vec<String> = p.names().map(String::from).collect();
            for n in names {
                let m = p.get_mut(&n).unwrap();
                for v in m.data_mut() {
                    *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let ins = inputs(seed, 3);
            let mut tape = Tape::new();
            let (_, traj) = rollout(&p, &cfg, &ins, &mut tape);
            let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
            let ret = discounted_returns(&rewards, cfg.gamma);
            let adv: Vec<f64> = traj.iter().zip(&ret).map(|(t, r)| r - tape.scalar(t.vars.value)).collect();
            let err = finite_diff_check(
                |s| {
                    let mut tape = Tape::new();
                    let (b, traj) = rollout(s, &cfg, &ins, &mut tape);
                    let l = a3c_on_tape(&mut tape, &traj, &cfg, Some(&adv)).unwrap();
                    let g = tape.backward(l)?;
                    Ok((tape.scalar(l), b.collect(&g)))
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }
}
