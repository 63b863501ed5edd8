use serde::{Deserialize, Serialize};

use super::{class_attributes, AttributeVector, ClassFeatureOracle, PerceptionConfig, PerceptionError, Result};
use crate::gridworld::{ClassSplit, SplitKind};
use crate::numerics::{sgd_step, Group, Matrix, ParamStore, Tape};
use crate::seeding;

/// Two-layer attribute-to-feature-map generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tfg {
    params: ParamStore,
    d_g: usize,
    dim: usize,
    trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfgReport {
    /// Loss on the known classes before training and after every epoch.
    pub losses: Vec<f64>,
}

impl Tfg {
    pub fn new(seed: u64, vocab: usize, cfg: &PerceptionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeding::rng_for(seed, "tfg", 0);
        let mut params = ParamStore::new();
        let out = cfg.d_g * cfg.dim;
        params.init(&mut rng, "tfg.w1", Group::Psi, vocab, cfg.tfg_hidden)?;
        params.insert("tfg.b1", Group::Psi, Matrix::zeros(1, cfg.tfg_hidden))?;
        params.init(&mut rng, "tfg.w2", Group::Psi, cfg.tfg_hidden, out)?;
        params.insert("tfg.b2", Group::Psi, Matrix::zeros(1, out))?;
        Ok(Self { params, d_g: cfg.d_g, dim: cfg.dim, trained: false })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, params: &ParamStore, tape: &mut Tape, x: &Matrix) -> Result<(crate::numerics::Var, crate::numerics::Bound)> {
        let b = params.bind(tape);
        let xv = tape.constant(x.clone());
        let h = tape.affine(xv, b.var("tfg.w1")?, b.var("tfg.b1")?)?;
        let h = tape.relu(h);
        let o = tape.affine(h, b.var("tfg.w2")?, b.var("tfg.b2")?)?;
        Ok((o, b))
    }

    fn batch(split: &ClassSplit, oracle: &ClassFeatureOracle, d_g: usize) -> Result<(Matrix, Matrix)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for info in split.classes(SplitKind::Known) {
            xs.push(class_attributes(split, info.id)?.as_slice().to_vec());
            let p = oracle.prototype(info.id)?;
            ys.push(p.iter().copied().cycle().take(p.len() * d_g).collect::<Vec<f64>>());
        }
        Ok((Matrix::from_rows(&xs)?, Matrix::from_rows(&ys)?))
    }

    fn loss_and_grads(&self, params: &ParamStore, x: &Matrix, y: &Matrix) -> Result<(f64, crate::numerics::Grads)> {
        let mut tape = Tape::new();
        let (o, b) = self.forward(params, &mut tape, x)?;
        let yv = tape.constant(y.clone());
        let d = tape.sub(o, yv)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        // Squared error per feature row, averaged over rows.
        let loss = tape.scale(s, 1.0 / (y.rows() * self.d_g) as f64);
        let g = tape.backward(loss)?;
        Ok((tape.scalar(loss), b.collect(&g)))
    }

    /// Full-batch gradient descent on squared error against the prototype
    /// maps of the known classes only.
    pub fn train(&mut self, split: &ClassSplit, oracle: &ClassFeatureOracle) -> Result<TfgReport> {
        let cfg = oracle.config();
        let (x, y) = Self::batch(split, oracle, self.d_g)?;
        let mut losses = Vec::with_capacity(cfg.tfg_epochs + 1);
        let mut params = self.params.clone();
        for _ in 0..cfg.tfg_epochs {
            let (l, g) = self.loss_and_grads(&params, &x, &y)?;
            losses.push(l);
            sgd_step(&mut params, &g, cfg.tfg_lr)?;
        }
        losses.push(self.loss_and_grads(&params, &x, &y)?.0);
        self.params = params;
        self.trained = true;
        Ok(TfgReport { losses })
    }

    /// Training loss on the known classes.
    pub fn known_loss(&self, split: &ClassSplit, oracle: &ClassFeatureOracle) -> Result<f64> {
        let (x, y) = Self::batch(split, oracle, self.d_g)?;
        Ok(self.loss_and_grads(&self.params, &x, &y)?.0)
    }

    /// `d_g × D` generated feature map.
    pub fn generate(&self, attrs: &AttributeVector) -> Result<Matrix> {
        if !self.trained {
            return Err(PerceptionError::NotTrained);
        }
        let mut tape = Tape::new();
        let (o, _) = self.forward(&self.params, &mut tape, &attrs.to_row())?;
        Ok(tape.value(o).reshape(self.d_g, self.dim)?)
    }
}
