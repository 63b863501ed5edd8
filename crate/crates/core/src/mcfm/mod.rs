//! Contrastive feature modifier: a translation score between known-object
//! features, their egocentric pose and the identifier feature, the
//! co-occurrence loss, the per-episode class buffer and the inner-loop step.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::ClassId;
use crate::numerics::{sgd_step, Grads, Group, Matrix, NumericsError, ParamStore, Tape, Var};
use crate::perception::{Detection, EgoPose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McfmError {
    #[error("inner update requested on a step where the identifier did not fire")]
    ClsNotSet,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, McfmError>;

pub const R1: &str = "mcfm.r1";
pub const R2: &str = "mcfm.r2";
pub const R3: &str = "mcfm.r3";

/// Adds the α group (`W^R1`, `W^R2`, `W^R3`) to `store`.
pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, d_f: usize) -> Result<()> {
    store.init(rng, R1, Group::Alpha, d_f, d_f)?;
    store.init(rng, R2, Group::Alpha, 6, d_f)?;
    store.init(rng, R3, Group::Alpha, d_f, d_f)?;
    Ok(())
}

fn check_row(m: &Matrix, cols: usize, what: &str) -> Result<()> {
    if m.shape() != (1, cols) {
        return Err(McfmError::Dimension(format!("{what} is {:?}, expected (1, {cols})", m.shape())));
    }
    Ok(())
}

/// `‖f_k·W^R1 + p·W^R2 − f_t·W^R3‖²`.
pub fn score_s(f_k: &Matrix, p: &EgoPose, f_t: &Matrix, params: &ParamStore) -> Result<f64> {
    let r1 = params.get(R1)?;
    check_row(f_k, r1.rows(), "f_k")?;
    check_row(f_t, r1.rows(), "f_t")?;
    let a = f_k.matmul(r1)?;
    let b = p.to_row().matmul(params.get(R2)?)?;
    let c = f_t.matmul(params.get(R3)?)?;
    Ok(a.add(&b)?.sub(&c)?.sq_norm())
}

/// `f_t + f_t·W^R3`.
pub fn modify_ft(f_t: &Matrix, params: &ParamStore) -> Result<Matrix> {
    let r3 = params.get(R3)?;
    check_row(f_t, r3.rows(), "f_t")?;
    Ok(f_t.add(&f_t.matmul(r3)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BufferEntry {
    mean: Vec<f64>,
    count: usize,
    last_pose: EgoPose,
}

/// Per-episode running mean of observed known-class features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassFeatureBuffer {
    entries: BTreeMap<ClassId, BufferEntry>,
}

impl ClassFeatureBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: ClassId, feature: &[f64], pose: EgoPose) {
        let e = self
            .entries
            .entry(class)
            .or_insert_with(|| BufferEntry { mean: vec![0.0; feature.len()], count: 0, last_pose: pose });
        e.count += 1;
        let k = e.count as f64;
        for (m, x) in e.mean.iter_mut().zip(feature) {
            *m += (x - *m) / k;
        }
        e.last_pose = pose;
    }

    pub fn observe(&mut self, detections: &[Detection]) {
        for d in detections {
            self.insert(d.class, &d.feature, d.pose);
        }
    }

    pub fn mean(&self, class: ClassId) -> Option<&[f64]> {
        self.entries.get(&class).map(|e| e.mean.as_slice())
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.entries.get(&class).map_or(0, |e| e.count)
    }

    pub fn last_pose(&self, class: ClassId) -> Option<EgoPose> {
        self.entries.get(&class).map(|e| e.last_pose)
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.entries.contains_key(&class)
    }
}

/// Known classes seen together with an unlabeled object (`O`) and known
/// classes absent from that view (`Ô`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceSets {
    pub present: Vec<ClassId>,
    pub absent: Vec<ClassId>,
}

impl CooccurrenceSets {
    pub fn build(cls: bool, detections: &[Detection], known: &[ClassId]) -> Self {
        if !cls {
            return Self::default();
        }
        let mut present: Vec<ClassId> = detections.iter().map(|d| d.class).collect();
        present.sort_unstable();
        present.dedup();
        let absent = known.iter().copied().filter(|c| !present.contains(c)).collect();
        Self { present, absent }
    }
}

/// One score term: a class feature and the pose it is scored at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTerm {
    pub feature: Vec<f64>,
    pub pose: EgoPose,
}

/// Resolved inputs of the contrastive loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McfmInputs {
    pub present: Vec<ScoreTerm>,
    pub absent: Vec<ScoreTerm>,
    pub f_t: Matrix,
}

impl McfmInputs {
    /// Buffer means for every class; present classes use their pose in the
    /// current view, absent ones their last observed pose. Absent classes
    /// never observed this episode are skipped. `None` when either side is
    /// empty.
    pub fn assemble(
        sets: &CooccurrenceSets,
        buffer: &ClassFeatureBuffer,
        detections: &[Detection],
        f_t: &Matrix,
    ) -> Option<Self> {
        let present: Vec<ScoreTerm> = sets
            .present
            .iter()
            .filter_map(|c| {
                let pose = detections.iter().find(|d| d.class == *c)?.pose;
                Some(ScoreTerm { feature: buffer.mean(*c)?.to_vec(), pose })
            })
            .collect();
        let absent: Vec<ScoreTerm> = sets
            .absent
            .iter()
            .filter_map(|c| Some(ScoreTerm { feature: buffer.mean(*c)?.to_vec(), pose: buffer.last_pose(*c)? }))
            .collect();
        if present.is_empty() || absent.is_empty() {
            return None;
        }
        Some(Self { present, absent, f_t: f_t.clone() })
    }
}

fn stack(terms: &[ScoreTerm]) -> Result<(Matrix, Matrix)> {
    let f: Vec<Vec<f64>> = terms.iter().map(|t| t.feature.clone()).collect();
    let p: Vec<Vec<f64>> = terms.iter().map(|t| t.pose.0.to_vec()).collect();
    Ok((Matrix::from_rows(&f)?, Matrix::from_rows(&p)?))
}

fn mean_score(tape: &mut Tape, terms: &[ScoreTerm], ft_r3: Var, r1: Var, r2: Var) -> Result<Var> {
    let (f, p) = stack(terms)?;
    let f = tape.constant(f);
    let p = tape.constant(p);
    let a = tape.matmul(f, r1)?;
    let b = tape.matmul(p, r2)?;
    let t = tape.add(a, b)?;
    let neg = tape.scale(ft_r3, -1.0);
    let t = tape.add_row(t, neg)?;
    let sq = tape.square(t);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / terms.len() as f64))
}

/// Records `−ln σ(mean_Ô S − mean_O S)` on `tape`.
pub(crate) fn loss_on_tape(tape: &mut Tape, r1: Var, r2: Var, r3: Var, inputs: &McfmInputs) -> Result<Var> {
    let d = tape.value(r1).rows();
    check_row(&inputs.f_t, d, "f_t")?;
    for t in inputs.present.iter().chain(&inputs.absent) {
        if t.feature.len() != d {
            return Err(McfmError::Dimension(format!("feature of length {}, expected {d}", t.feature.len())));
        }
    }
    let ft = tape.constant(inputs.f_t.clone());
    let ft_r3 = tape.matmul(ft, r3)?;
    let pos = mean_score(tape, &inputs.present, ft_r3, r1, r2)?;
    let neg = mean_score(tape, &inputs.absent, ft_r3, r1, r2)?;
    // −ln σ(x) = softplus(−x) with x = neg − pos.
    let x = tape.sub(pos, neg)?;
    Ok(tape.softplus(x))
}

pub fn loss_and_grads(params: &ParamStore, inputs: &McfmInputs) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let alpha = params.group(Group::Alpha);
    let b = alpha.bind(&mut tape);
    let loss = loss_on_tape(&mut tape, b.var(R1)?, b.var(R2)?, b.var(R3)?, inputs)?;
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss), b.collect(&g)))
}

pub fn loss_mcfm(params: &ParamStore, inputs: &McfmInputs) -> Result<f64> {
    let mut tape = Tape::new();
    let alpha = params.group(Group::Alpha);
    let b = alpha.bind_filtered(&mut tape, |_| false);
    let loss = loss_on_tape(&mut tape, b.var(R1)?, b.var(R2)?, b.var(R3)?, inputs)?;
    Ok(tape.scalar(loss))
}

/// One SGD step of the α group of `alpha_i` on the contrastive loss.
/// Returns the loss before the step.
pub fn inner_update(alpha_i: &mut ParamStore, cls: bool, inputs: &McfmInputs, lr: f64) -> Result<f64> {
    if !cls {
        return Err(McfmError::ClsNotSet);
    }
    let (l, g) = loss_and_grads(alpha_i, inputs)?;
    sgd_step(alpha_i, &g, lr)?;
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::seeding;
    use rand_distr::StandardNormal;

    fn rv<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn pose<R: Rng>(rng: &mut R) -> EgoPose {
        let v = rv(rng, 6);
        EgoPose([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    fn instance(seed: u64, d: usize) -> (ParamStore, McfmInputs) {
        let mut rng = seeding::rng(seed);
        let mut p = ParamStore::new();
        init_params(&mut p, &mut rng, d).unwrap();
        let n_pos = 1 + (seed as usize % 3);
        let n_neg = 1 + (seed as usize % 2);
        let present = (0..n_pos).map(|_| ScoreTerm { feature: rv(&mut rng, d), pose: pose(&mut rng) }).collect();
        let absent = (0..n_neg).map(|_| ScoreTerm { feature: rv(&mut rng, d), pose: pose(&mut rng) }).collect();
        let f_t = Matrix::row_vector(rv(&mut rng, d));
        (p, McfmInputs { present, absent, f_t })
    }

    #[test]
    fn zero_weights_give_zero_score() {
        let mut p = ParamStore::new();
        p.insert(R1, Group::Alpha, Matrix::zeros(3, 3)).unwrap();
        p.insert(R2, Group::Alpha, Matrix::zeros(6, 3)).unwrap();
        p.insert(R3, Group::Alpha, Matrix::zeros(3, 3)).unwrap();
        let f = Matrix::row_vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(score_s(&f, &EgoPose([1.0; 6]), &f, &p).unwrap(), 0.0);
    }

    #[test]
    fn satisfied_translation_scores_zero() {
        let mut p = ParamStore::new();
        p.insert(R1, Group::Alpha, Matrix::identity(2)).unwrap();
        p.insert(R2, Group::Alpha, Matrix::zeros(6, 2)).unwrap();
        p.insert(R3, Group::Alpha, Matrix::identity(2)).unwrap();
        let f = Matrix::row_vector(vec![0.3, -0.7]);
        assert_eq!(score_s(&f, &EgoPose([2.0; 6]), &f, &p).unwrap(), 0.0);
    }

    #[test]
    fn score_matches_scalar_expansion() {
        let (p, inp) = instance(7, 4);
        let fk = &inp.present[0].feature;
        let pose = inp.present[0].pose;
        let (r1, r2, r3) = (p.get(R1).unwrap(), p.get(R2).unwrap(), p.get(R3).unwrap());
        let mut want = 0.0;
        for j in 0..4 {
            let mut t = 0.0;
            for i in 0..4 {
                t += fk[i] * r1.get(i, j) - inp.f_t.get(0, i) * r3.get(i, j);
            }
            for i in 0..6 {
                t += pose.0[i] * r2.get(i, j);
            }
            want += t * t;
        }
        let got = score_s(&Matrix::row_vector(fk.clone()), &pose, &inp.f_t, &p).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn equal_means_give_ln_two() {
        let (p, mut inp) = instance(3, 4);
        inp.absent = inp.present.clone();
        assert!((loss_mcfm(&p, &inp).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_is_monotone_in_present_scores() {
        for seed in 0..20 {
            let (p, inp) = instance(seed, 4);
            let (_, other) = instance(seed + 1000, 4);
            let mut swapped = inp.clone();
            swapped.present[0] = other.present[0].clone();
            let s = |t: &ScoreTerm| score_s(&Matrix::row_vector(t.feature.clone()), &t.pose, &inp.f_t, &p).unwrap();
            let (sa, sb) = (s(&inp.present[0]), s(&swapped.present[0]));
            let (la, lb) = (loss_mcfm(&p, &inp).unwrap(), loss_mcfm(&p, &swapped).unwrap());
            assert_eq!(sa < sb, la < lb, "seed {seed}");
            assert!(la > 0.0 && lb > 0.0);
        }
    }

    #[test]
    fn modify_examples() {
        let f = Matrix::row_vector(vec![1.0, -2.0]);
        let mut p = ParamStore::new();
        p.insert(R3, Group::Alpha, Matrix::zeros(2, 2)).unwrap();
        assert_eq!(modify_ft(&f, &p).unwrap(), f);
        *p.get_mut(R3).unwrap() = Matrix::identity(2);
        assert_eq!(modify_ft(&f, &p).unwrap(), f.scale(2.0));
    }

    #[test]
    fn buffer_mean_is_arithmetic_mean() {
        let mut rng = seeding::rng(2);
        let mut b = ClassFeatureBuffer::new();
        let xs: Vec<Vec<f64>> = (0..7).map(|_| rv(&mut rng, 5)).collect();
        for x in &xs {
            b.insert(ClassId(1), x, EgoPose([0.0; 6]));
        }
        let m = b.mean(ClassId(1)).unwrap();
        for j in 0..5 {
            let want = xs.iter().map(|x| x[j]).sum::<f64>() / 7.0;
            assert!((m[j] - want).abs() < 1e-12);
        }
        assert_eq!(b.count(ClassId(1)), 7);
        assert!(!b.contains(ClassId(2)));
    }

    #[test]
    fn sets_empty_without_cls() {
        let d = Detection { class: ClassId(0), object: 0, feature: vec![0.0], pose: EgoPose([0.0; 6]) };
        let known = [ClassId(0), ClassId(1)];
        assert_eq!(CooccurrenceSets::build(false, &[d.clone()], &known), CooccurrenceSets::default());
        let s = CooccurrenceSets::build(true, &[d], &known);
        assert_eq!(s.present, vec![ClassId(0)]);
        assert_eq!(s.absent, vec![ClassId(1)]);
    }

    #[test]
    fn inner_update_requires_cls() {
        let (mut p, inp) = instance(1, 3);
        assert_eq!(inner_update(&mut p, false, &inp, 1e-3), Err(McfmError::ClsNotSet));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (p, inp) = instance(seed, 4);
            let err = finite_diff_check(
                |s| loss_and_grads(s, &inp).map_err(|e| match e {
                    McfmError::Numerics(n) => n,
                    other => panic!("{other}"),
                }),
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn small_step_descends() {
        for seed in 0..20 {
            let (mut p, inp) = instance(seed, 4);
            let before = loss_mcfm(&p, &inp).unwrap();
            inner_update(&mut p, true, &inp, 1e-3).unwrap();
            assert!(loss_mcfm(&p, &inp).unwrap() <= before, "seed {seed}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, mut inp) = instance(5, 3);
        for t in inp.present.iter_mut().chain(inp.absent.iter_mut()) {
            t.feature = vec![0.0; 3];
            t.pose = EgoPose([0.0; 6]);
        }
        inp.f_t = Matrix::zeros(1, 3);
        let before = p.clone();
        inner_update(&mut p, true, &inp, 1e-2).unwrap();
        assert_eq!(p, before);
    }
}
