use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::{Matrix, NumericsError, Result};

/// Parameter groups updated on different schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Contrastive feature modifier weights.
    Alpha,
    /// Object-graph weights.
    Beta,
    /// Everything else that is trained during navigation.
    Psi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub group: Group,
    pub value: Matrix,
}

/// Named parameters. Cloning produces an independent copy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Matrix>;

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Matrix) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(name));
        }
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        self.params.insert(name, Param { group, value });
        Ok(())
    }

    /// Adds a `rows×cols` parameter initialized uniformly with fan-in `rows`.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R, name: &str, group: Group, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, group, init_uniform(rng, rows, cols, rows))
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| NumericsError::UnknownParameter(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params.get_mut(name).map(|p| &mut p.value).ok_or_else(|| NumericsError::UnknownParameter(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copy of the parameters in one group.
    pub fn group(&self, group: Group) -> ParamStore {
        let params = self.params.iter().filter(|(_, p)| p.group == group).map(|(k, v)| (k.clone(), v.clone())).collect();
        ParamStore { params }
    }

    /// Copy of the named parameters.
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<ParamStore> {
        let mut params = BTreeMap::new();
        for n in names {
            let p = self.params.get(n).ok_or_else(|| NumericsError::UnknownParameter(n.to_string()))?;
            params.insert(n.to_string(), p.clone());
        }
        Ok(ParamStore { params })
    }

    /// Overwrites existing entries with the values in `other`.
    pub fn overwrite(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in &other.params {
            *self.get_mut(name)? = p.value.clone();
        }
        Ok(())
    }

    /// Zero gradient for every parameter.
    pub fn zero_grads(&self) -> Grads {
        self.params.iter().map(|(k, p)| (k.clone(), Matrix::zeros(p.value.rows(), p.value.cols()))).collect()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_filtered(tape, |_| true)
    }

    /// Registers parameters as leaves where `trainable` holds, constants otherwise.
    pub fn bind_filtered(&self, tape: &mut Tape, trainable: impl Fn(&Param) -> bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            let v = if trainable(p) { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) };
            vars.insert(name.clone(), (v, p.value.shape()));
        }
        Bound { vars }
    }

    /// Stable 64-bit-per-entry byte encoding used for hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in &self.params {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, (Var, (usize, usize))>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).map(|(v, _)| *v).ok_or_else(|| NumericsError::UnknownParameter(name.into()))
    }

    /// Gradients for every bound parameter; parameters the loss does not
    /// reach get zeros.
    pub fn collect(&self, grads: &Gradients) -> Grads {
        self.vars
            .iter()
            .map(|(name, (v, (r, c)))| {
                let g = grads.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(*r, *c));
                (name.clone(), g)
            })
            .collect()
    }

    /// Adds this pass's gradients into `acc`, creating entries as needed.
    pub fn accumulate_into(&self, grads: &Gradients, acc: &mut Grads) -> Result<()> {
        for (name, (v, (r, c))) in &self.vars {
            if let Some(g) = grads.get(*v) {
                match acc.get_mut(name) {
                    Some(a) => a.axpy(1.0, g)?,
                    None => {
                        acc.insert(name.clone(), g.clone());
                    }
                }
            } else if !acc.contains_key(name) {
                acc.insert(name.clone(), Matrix::zeros(*r, *c));
            }
        }
        Ok(())
    }
}
