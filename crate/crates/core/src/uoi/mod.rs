//! Unlabeled-object identifier: a small post-norm transformer that compares
//! the observation map with generated maps of the unknown classes and emits a
//! presence probability plus the pooled feature `f_t`.

mod pretrain;

pub use pretrain::{build_frame_dataset, pretrain, select_epoch, FrameSample, PretrainConfig, PretrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{sigmoid_scalar, Bound, Group, Matrix, NumericsError, ParamStore, Tape, Var};
use crate::seeding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UoiError {
    #[error("feature bank holds {got} maps, expected {expected}")]
    BankSize { expected: usize, got: usize },
    #[error("feature map is {got:?}, expected {expected:?}")]
    MapShape { expected: (usize, usize), got: (usize, usize) },
    #[error("empty frame dataset")]
    EmptyDataset,
    #[error("invalid identifier config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Perception(#[from] crate::perception::PerceptionError),
    #[error(transparent)]
    Grid(#[from] crate::gridworld::GridError),
}

pub type Result<T> = std::result::Result<T, UoiError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UoiConfig {
    /// Transformer layers `Y`.
    pub layers: usize,
    pub ffn_hidden: usize,
    /// Width of `f_t`.
    pub d_f: usize,
    /// Presence threshold on the probability.
    pub tau: f64,
}

impl Default for UoiConfig {
    fn default() -> Self {
        Self { layers: 2, ffn_hidden: 64, d_f: 32, tau: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UoiOutput {
    pub f_t: Matrix,
    pub cls_prob: f64,
    pub cls: bool,
}

const LN_EPS: f64 = 1e-5;

/// Identifier weights. The model width equals the feature width `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uoi {
    config: UoiConfig,
    d_g: usize,
    dim: usize,
    bank_size: usize,
    params: ParamStore,
}

/// Binary cross entropy with the probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn uoi_loss(p: f64, gt: bool) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if gt {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

impl Uoi {
    pub fn new(seed: u64, d_g: usize, dim: usize, bank_size: usize, config: UoiConfig) -> Result<Self> {
        if config.layers == 0 || config.d_f == 0 || config.ffn_hidden == 0 || bank_size == 0 {
            return Err(UoiError::Config("layers, widths and bank size must be positive".into()));
        }
        let mut rng = seeding::rng_for(seed, "uoi", 0);
        let mut p = ParamStore::new();
        let m = dim;
        p.init(&mut rng, "uoi.pos", Group::Psi, 2 * d_g, m)?;
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                p.init(&mut rng, &format!("uoi.l{l}.{w}"), Group::Psi, m, m)?;
            }
            for ln in ["ln1", "ln2"] {
                p.insert(format!("uoi.l{l}.{ln}.g"), Group::Psi, Matrix::filled(1, m, 1.0))?;
                p.insert(format!("uoi.l{l}.{ln}.b"), Group::Psi, Matrix::zeros(1, m))?;
            }
            p.init(&mut rng, &format!("uoi.l{l}.ff1.w"), Group::Psi, m, config.ffn_hidden)?;
            p.insert(format!("uoi.l{l}.ff1.b"), Group::Psi, Matrix::zeros(1, config.ffn_hidden))?;
            p.init(&mut rng, &format!("uoi.l{l}.ff2.w"), Group::Psi, config.ffn_hidden, m)?;
            p.insert(format!("uoi.l{l}.ff2.b"), Group::Psi, Matrix::zeros(1, m))?;
        }
        p.init(&mut rng, "uoi.m1", Group::Psi, m, config.d_f)?;
        p.init(&mut rng, "uoi.m2", Group::Psi, config.d_f, 1)?;
        Ok(Self { config, d_g, dim, bank_size, params: p })
    }

    pub fn config(&self) -> &UoiConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bank_size(&self) -> usize {
        self.bank_size
    }

    fn check(&self, f_o: &Matrix, bank: &[Matrix]) -> Result<()> {
        let want = (self.d_g, self.dim);
        if bank.len() != self.bank_size {
            return Err(UoiError::BankSize { expected: self.bank_size, got: bank.len() });
        }
        for m in std::iter::once(f_o).chain(bank) {
            if m.shape() != want {
                return Err(UoiError::MapShape { expected: want, got: m.shape() });
            }
        }
        Ok(())
    }

    fn layer_norm(tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let n = tape.layer_norm_rows(x, LN_EPS);
        let n = tape.mul_row(n, b.var(&format!("{prefix}.g"))?)?;
        Ok(tape.add_row(n, b.var(&format!("{prefix}.b"))?)?)
    }

    /// First-token output of the last layer for one input sequence.
    fn encode(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut x = tape.add(x, b.var("uoi.pos")?)?;
        for l in 0..self.config.layers {
            let w = |n: &str| b.var(&format!("uoi.l{l}.{n}"));
            // Only the first token of the last layer is read out.
            let q_src = if l + 1 == self.config.layers { tape.slice_rows(x, 0, 1)? } else { x };
            let q = tape.matmul(q_src, w("wq")?)?;
            let k = tape.matmul(x, w("wk")?)?;
            let v = tape.matmul(x, w("wv")?)?;
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            let att = tape.matmul(a, v)?;
            let att = tape.matmul(att, w("wo")?)?;
            let h = tape.add(q_src, att)?;
            let h = Self::layer_norm(tape, b, h, &format!("uoi.l{l}.ln1"))?;
            let f = tape.affine(h, w("ff1.w")?, w("ff1.b")?)?;
            let f = tape.relu(f);
            let f = tape.affine(f, w("ff2.w")?, w("ff2.b")?)?;
            let h2 = tape.add(h, f)?;
            x = Self::layer_norm(tape, b, h2, &format!("uoi.l{l}.ln2"))?;
        }
        Ok(x)
    }

    /// Records the forward pass. Returns `(pooled descriptor, f_t, logit)`.
    pub(crate) fn forward_on_tape(&self, tape: &mut Tape, b: &Bound, f_o: &Matrix, bank: &[Matrix]) -> Result<(Var, Var, Var)> {
        self.check(f_o, bank)?;
        let fo = tape.constant(f_o.clone());
        let mut tokens = Vec::with_capacity(bank.len());
        for g in bank {
            let gv = tape.constant(g.clone());
            let x = tape.concat_rows(&[fo, gv])?;
            tokens.push(self.encode(tape, b, x)?);
        }
        let ot = tape.concat_rows(&tokens)?;
        let pooled = tape.mean_rows(ot);
        let ft = tape.matmul(pooled, b.var("uoi.m1")?)?;
        let ft = tape.relu(ft);
        let logit = tape.matmul(ft, b.var("uoi.m2")?)?;
        Ok((pooled, ft, logit))
    }

    pub fn forward(&self, f_o: &Matrix, bank: &[Matrix]) -> Result<UoiOutput> {
        let mut tape = Tape::new();
        let b = self.params.bind_filtered(&mut tape, |_| false);
        let (_, ft, logit) = self.forward_on_tape(&mut tape, &b, f_o, bank)?;
        let cls_prob = sigmoid_scalar(tape.scalar(logit));
        Ok(UoiOutput { f_t: tape.value(ft).clone(), cls_prob, cls: cls_prob >= self.config.tau })
    }

    /// Per-class first-token outputs, exposed for pooling checks.
    pub fn class_tokens(&self, f_o: &Matrix, bank: &[Matrix]) -> Result<Vec<Matrix>> {
        self.check(f_o, bank)?;
        let mut tape = Tape::new();
        let b = self.params.bind_filtered(&mut tape, |_| false);
        let fo = tape.constant(f_o.clone());
        let mut out = Vec::new();
        for g in bank {
            let gv = tape.constant(g.clone());
            let x = tape.concat_rows(&[fo, gv])?;
            let t = self.encode(&mut tape, &b, x)?;
            out.push(tape.value(t).clone());
        }
        Ok(out)
    }

    /// Mean BCE over `(f_o, bank, gt)` samples and its gradient with respect
    /// to every weight.
    pub fn loss_and_grads(
        &self,
        params: &ParamStore,
        samples: &[(&Matrix, &[Matrix], bool)],
    ) -> Result<(f64, crate::numerics::Grads)> {
        let mut total = 0.0;
        let mut acc = crate::numerics::Grads::new();
        let w = 1.0 / samples.len().max(1) as f64;
        for (f_o, bank, gt) in samples {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let (_, _, z) = self.forward_on_tape(&mut tape, &b, f_o, bank)?;
            // BCE on the logit: softplus(z) - gt * z.
            let sp = tape.softplus(z);
            let loss = if *gt { tape.sub(sp, z)? } else { sp };
            let loss = tape.scale(loss, w);
            total += tape.scalar(loss);
            let g = tape.backward(loss)?;
            b.accumulate_into(&g, &mut acc)?;
        }
        Ok((total, acc))
    }
}
