//! Object-graph learner: graph construction from episode co-visibility, a
//! one-layer GCN, two-view augmentation and the decorrelation loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{ClassId, Frame};
use crate::mcfm::ClassFeatureBuffer;
use crate::numerics::{relu, sgd_step, Grads, Group, Matrix, NumericsError, ParamStore, Tape, Var};
use crate::seeding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoglError {
    #[error("augmentation probabilities must lie in [0, 1]")]
    BadSpec,
    #[error("graph has {got} nodes, expected {expected}")]
    NodeCount { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, MoglError>;

pub const WG: &str = "mogl.wg";

/// Adds the β group (`W^G`) to `store`.
pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, d_f: usize, d_out: usize) -> Result<()> {
    store.init(rng, WG, Group::Beta, d_f, d_out)?;
    Ok(())
}

/// Undirected co-visibility edges among `I` known classes plus one
/// unlabeled node, accumulated over an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoVisibilityLog {
    known: Vec<ClassId>,
    adj: Vec<bool>,
}

impl CoVisibilityLog {
    pub fn new(known: &[ClassId]) -> Self {
        let n = known.len() + 1;
        Self { known: known.to_vec(), adj: vec![false; n * n] }
    }

    pub fn nodes(&self) -> usize {
        self.known.len() + 1
    }

    pub fn unlabeled_node(&self) -> usize {
        self.known.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.nodes() + j]
    }

    pub fn add_edge(&mut self, i: usize, j: usize) {
        let n = self.nodes();
        self.adj[i * n + j] = true;
        self.adj[j * n + i] = true;
    }

    /// Known classes co-visible within `radius` cells of each other get an
    /// edge; when the identifier fires, every visible known class is linked
    /// to the unlabeled node.
    pub fn record(&mut self, frame: &Frame, cls: bool, radius: f64) {
        let vis: Vec<(usize, f64, f64)> = frame
            .objects
            .iter()
            .filter_map(|o| {
                let i = self.known.iter().position(|c| *c == o.class)?;
                Some((i, o.x as f64, o.y as f64))
            })
            .collect();
        for (a, (i, xi, yi)) in vis.iter().enumerate() {
            for (j, xj, yj) in &vis[a + 1..] {
                if i != j && ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt() <= radius + 1e-9 {
                    self.add_edge(*i, *j);
                }
            }
            if cls {
                self.add_edge(*i, self.unlabeled_node());
            }
        }
    }

    pub fn edge_count(&self) -> usize {
        let n = self.nodes();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|(i, j)| self.has_edge(*i, *j)).count()
    }
}

/// Node features and row-normalized adjacency (self-loops included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectGraph {
    pub v: Matrix,
    pub e: Matrix,
}

fn normalize(n: usize, edge: impl Fn(usize, usize) -> bool) -> Matrix {
    let mut e = Matrix::zeros(n, n);
    for i in 0..n {
        let nbrs: Vec<usize> = (0..n).filter(|j| *j == i || edge(i, *j)).collect();
        let w = 1.0 / nbrs.len() as f64;
        for j in nbrs {
            e.set(i, j, w);
        }
    }
    e
}

/// Rows `0..I` hold buffered known-class means (zero when unobserved),
/// row `I` holds `f_t′`.
pub fn build_graph(buffer: &ClassFeatureBuffer, f_t_mod: &Matrix, log: &CoVisibilityLog) -> Result<ObjectGraph> {
    let n = log.nodes();
    let d = f_t_mod.cols();
    let mut v = Matrix::zeros(n, d);
    for (i, c) in log.known.iter().enumerate() {
        if let Some(m) = buffer.mean(*c) {
            if m.len() != d {
                return Err(NumericsError::shape("build_graph", (1, m.len()), (1, d)).into());
            }
            v.row_mut(i).copy_from_slice(m);
        }
    }
    v.row_mut(n - 1).copy_from_slice(f_t_mod.row(0));
    let e = normalize(n, |i, j| log.has_edge(i, j));
    Ok(ObjectGraph { v, e })
}

/// `relu(E·V·W^G)`.
pub fn gcn_forward(g: &ObjectGraph, params: &ParamStore) -> Result<Matrix> {
    Ok(relu(&g.e.matmul(&g.v)?.matmul(params.get(WG)?)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub edge_drop: f64,
    pub feature_mask: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { edge_drop: 0.2, feature_mask: 0.2 }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if ok(self.edge_drop) && ok(self.feature_mask) {
            Ok(())
        } else {
            Err(MoglError::BadSpec)
        }
    }
}

fn augment_once<R: Rng>(g: &ObjectGraph, spec: &AugmentationSpec, rng: &mut R) -> ObjectGraph {
    let n = g.e.rows();
    let mut keep = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if g.e.get(i, j) > 0.0 || g.e.get(j, i) > 0.0 {
                let k = !rng.random_bool(spec.edge_drop);
                keep[i * n + j] = k;
                keep[j * n + i] = k;
            }
        }
    }
    let mut v = g.v.clone();
    for c in 0..v.cols() {
        if rng.random_bool(spec.feature_mask) {
            for r in 0..v.rows() {
                v.set(r, c, 0.0);
            }
        }
    }
    ObjectGraph { v, e: normalize(n, |i, j| keep[i * n + j]) }
}

/// Two independent augmented views, deterministic in `seed`.
pub fn augment(g: &ObjectGraph, spec: &AugmentationSpec, seed: u64) -> Result<(ObjectGraph, ObjectGraph)> {
    spec.validate()?;
    let mut rng = seeding::rng_for(seed, "augment", 0);
    let a = augment_once(g, spec, &mut rng);
    let b = augment_once(g, spec, &mut rng);
    Ok((a, b))
}

/// `‖Z_A − Z_B‖² + η(‖Z_AᵀZ_A − I‖² + ‖Z_BᵀZ_B − I‖²)` on already
/// standardized embeddings.
pub fn loss_cca(z_a: &Matrix, z_b: &Matrix, eta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z_a.clone());
    let b = tape.constant(z_b.clone());
    let l = cca_on_tape(&mut tape, a, b, eta)?;
    Ok(tape.scalar(l))
}

pub(crate) fn cca_on_tape(tape: &mut Tape, a: Var, b: Var, eta: f64) -> Result<Var> {
    let m = tape.value(a).cols();
    let eye = tape.constant(Matrix::identity(m));
    let d = tape.sub(a, b)?;
    let d = tape.square(d);
    let inv = tape.sum(d);
    let mut dec = Vec::new();
    for z in [a, b] {
        let zt = tape.transpose(z);
        let c = tape.matmul(zt, z)?;
        let c = tape.sub(c, eye)?;
        let c = tape.square(c);
        dec.push(tape.sum(c));
    }
    let dec = tape.add(dec[0], dec[1])?;
    let dec = tape.scale(dec, eta);
    Ok(tape.add(inv, dec)?)
}

fn view_embedding(tape: &mut Tape, g: &ObjectGraph, wg: Var) -> Result<Var> {
    let e = tape.constant(g.e.clone());
    let v = tape.constant(g.v.clone());
    let ev = tape.matmul(e, v)?;
    let f = tape.matmul(ev, wg)?;
    let f = tape.relu(f);
    Ok(tape.col_standardize(f))
}

/// Loss over two views after GCN encoding and column standardization, with
/// its gradient with respect to `W^G`.
pub fn loss_and_grads(params: &ParamStore, view_a: &ObjectGraph, view_b: &ObjectGraph, eta: f64) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let beta = params.group(Group::Beta);
    let b = beta.bind(&mut tape);
    let wg = b.var(WG)?;
    let za = view_embedding(&mut tape, view_a, wg)?;
    let zb = view_embedding(&mut tape, view_b, wg)?;
    let l = cca_on_tape(&mut tape, za, zb, eta)?;
    let g = tape.backward(l)?;
    Ok((tape.scalar(l), b.collect(&g)))
}

/// One SGD step of the β group on the two-view loss. Returns the loss before
/// the step.
pub fn inner_update_beta(beta_i: &mut ParamStore, view_a: &ObjectGraph, view_b: &ObjectGraph, eta: f64, lr: f64) -> Result<f64> {
    let (l, g) = loss_and_grads(beta_i, view_a, view_b, eta)?;
    sgd_step(beta_i, &g, lr)?;
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{AgentState, Heading, Pitch, SizeTag, VisibleObject};
    use crate::numerics::finite_diff_check;
    use crate::perception::EgoPose;
    use rand_distr::StandardNormal;

    fn rand_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn random_graph(seed: u64, n: usize, d: usize) -> ObjectGraph {
        let mut rng = seeding::rng(seed);
        let v = rand_matrix(&mut rng, n, d);
        let edges: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.4)).collect();
        let e = normalize(n, |i, j| edges[i.min(j) * n + i.max(j)]);
        ObjectGraph { v, e }
    }

    fn known(n: u16) -> Vec<ClassId> {
        (0..n).map(ClassId).collect()
    }

    #[test]
    fn fresh_log_gives_identity_adjacency() {
        let log = CoVisibilityLog::new(&known(3));
        let g = build_graph(&ClassFeatureBuffer::new(), &Matrix::zeros(1, 4), &log).unwrap();
        assert_eq!(g.e, Matrix::identity(4));
        assert_eq!(g.v, Matrix::zeros(4, 4));
    }

    fn vis(id: u32, class: u16, x: usize, y: usize) -> VisibleObject {
        VisibleObject { id, class: ClassId(class), x, y, size: SizeTag::Small, forward: 1.0, lateral: 0.0, distance: 1.0, bearing_deg: 0.0 }
    }

    #[test]
    fn covisible_classes_get_symmetric_edges() {
        let mut log = CoVisibilityLog::new(&known(3));
        let frame = Frame {
            scene_id: 0,
            agent: AgentState::new(0, 0, Heading::North, Pitch::Level),
            objects: vec![vis(0, 0, 1, 1), vis(1, 2, 2, 3), vis(2, 1, 6, 6)],
            gt: false,
        };
        log.record(&frame, false, 3.0);
        assert!(log.has_edge(0, 2) && log.has_edge(2, 0));
        assert!(!log.has_edge(0, 1));
        assert!(!log.has_edge(0, 3));
        log.record(&frame, true, 3.0);
        assert!(log.has_edge(1, 3) && log.has_edge(3, 0));
        let mut buf = ClassFeatureBuffer::new();
        buf.insert(ClassId(1), &[1.0, 2.0], EgoPose([0.0; 6]));
        let g = build_graph(&buf, &Matrix::row_vector(vec![5.0, 6.0]), &log).unwrap();
        assert_eq!(g.v.row(1), &[1.0, 2.0]);
        assert_eq!(g.v.row(0), &[0.0, 0.0]);
        assert_eq!(g.v.row(3), &[5.0, 6.0]);
    }

    #[test]
    fn rows_sum_to_one() {
        for seed in 0..20 {
            let g = random_graph(seed, 7, 3);
            for r in 0..7 {
                assert!((g.e.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_examples() {
        let mut p = ParamStore::new();
        p.insert(WG, Group::Beta, Matrix::identity(3)).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, 3.0, 0.0]]).unwrap();
        let g = ObjectGraph { v: v.clone(), e: Matrix::identity(2) };
        assert_eq!(gcn_forward(&g, &p).unwrap(), v);
        let z = ObjectGraph { v: Matrix::zeros(2, 3), e: normalize(2, |_, _| true) };
        assert_eq!(gcn_forward(&z, &p).unwrap(), Matrix::zeros(2, 3));
        let mut rng = seeding::rng(3);
        let g = random_graph(4, 5, 3);
        let w = rand_matrix(&mut rng, 3, 2);
        let mut p = ParamStore::new();
        p.insert(WG, Group::Beta, w.clone()).unwrap();
        let want = relu(&g.e.matmul(&g.v).unwrap().matmul(&w).unwrap());
        assert_eq!(gcn_forward(&g, &p).unwrap(), want);
    }

    #[test]
    fn gcn_rows_only_see_neighbours() {
        let g = random_graph(9, 6, 3);
        let mut p = ParamStore::new();
        p.insert(WG, Group::Beta, rand_matrix(&mut seeding::rng(1), 3, 4)).unwrap();
        let base = gcn_forward(&g, &p).unwrap();
        for j in 0..6 {
            let mut h = g.clone();
            for c in 0..3 {
                h.v.set(j, c, h.v.get(j, c) + 10.0);
            }
            let out = gcn_forward(&h, &p).unwrap();
            for i in 0..6 {
                if g.e.get(i, j) == 0.0 {
                    assert_eq!(out.row(i), base.row(i));
                }
            }
        }
    }

    #[test]
    fn node_permutation_permutes_output() {
        let g = random_graph(5, 5, 3);
        let mut p = ParamStore::new();
        p.insert(WG, Group::Beta, rand_matrix(&mut seeding::rng(2), 3, 4)).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let mut pv = Matrix::zeros(5, 3);
        let mut pe = Matrix::zeros(5, 5);
        for i in 0..5 {
            pv.row_mut(i).copy_from_slice(g.v.row(perm[i]));
            for j in 0..5 {
                pe.set(i, j, g.e.get(perm[i], perm[j]));
            }
        }
        let a = gcn_forward(&g, &p).unwrap();
        let b = gcn_forward(&ObjectGraph { v: pv, e: pe }, &p).unwrap();
        for i in 0..5 {
            for c in 0..4 {
                assert!((b.get(i, c) - a.get(perm[i], c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augmentation_examples() {
        let g = random_graph(1, 6, 4);
        let none = AugmentationSpec { edge_drop: 0.0, feature_mask: 0.0 };
        let (a, b) = augment(&g, &none, 3).unwrap();
        assert_eq!(a, g);
        assert_eq!(b, g);
        let all = AugmentationSpec { edge_drop: 1.0, feature_mask: 0.0 };
        let (a, _) = augment(&g, &all, 3).unwrap();
        assert_eq!(a.e, Matrix::identity(6));
        assert_eq!(AugmentationSpec { edge_drop: 1.5, feature_mask: 0.0 }.validate(), Err(MoglError::BadSpec));
        assert_eq!(AugmentationSpec { edge_drop: 0.1, feature_mask: -0.1 }.validate(), Err(MoglError::BadSpec));
        let spec = AugmentationSpec::default();
        assert_eq!(augment(&g, &spec, 9).unwrap(), augment(&g, &spec, 9).unwrap());
    }

    #[test]
    fn identical_orthonormal_embeddings_have_zero_loss() {
        let z = Matrix::from_rows(&[vec![0.6, 0.0], vec![0.8, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(loss_cca(&z, &z, 1e-3).unwrap().abs() < 1e-12);
        assert!(loss_cca(&z, &z.scale(0.5), 1e-3).unwrap() > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let g = random_graph(seed, 4, 3);
            let (a, b) = augment(&g, &AugmentationSpec { edge_drop: 0.3, feature_mask: 0.2 }, seed).unwrap();
            let mut p = ParamStore::new();
            init_params(&mut p, &mut seeding::rng(seed), 3, 2).unwrap();
            let err = finite_diff_check(
                |s| loss_and_grads(s, &a, &b, 1e-3).map_err(|e| match e {
                    MoglError::Numerics(n) => n,
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
            let g = random_graph(seed + 50, 7, 4);
            let (a, b) = augment(&g, &AugmentationSpec::default(), seed).unwrap();
            let mut p = ParamStore::new();
            init_params(&mut p, &mut seeding::rng(seed), 4, 3).unwrap();
            let before = loss_and_grads(&p, &a, &b, 1e-3).unwrap().0;
            inner_update_beta(&mut p, &a, &b, 1e-3, 1e-4).unwrap();
            let after = loss_and_grads(&p, &a, &b, 1e-3).unwrap().0;
            assert!(after <= before + 1e-12, "seed {seed}: {before} -> {after}");
        }
    }
}
