//! Named parameter storage and per-forward binding onto a tape.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(sd) => {
                let dist = Normal::new(0.0, sd).expect("positive sd");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Glorot => {
                let (fan_in, fan_out) = match shape {
                    [a] => (*a, *a),
                    [a, b] => (*a, *b),
                    [k, e, f] => (k * e, *f),
                    _ => (n, n),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            }
        };
        self.params.push(Param { name: name.into(), shape: shape.to_vec(), values });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.values.iter().all(|v| v.is_finite()))
    }

    /// Copy values from `other`, which must have the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.shape != theirs.shape || theirs.values.len() != mine.values.len() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                )));
            }
            mine.values.clone_from(&theirs.values);
        }
        Ok(())
    }
}

/// One forward pass over a [`ParamStore`]. Parameters are bound lazily: as
/// tape leaves when trainable, otherwise as constants.
pub struct Graph<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    trainable: bool,
    bound: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Graph<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Graph { tape, store, trainable, bound: RefCell::new(vec![None; store.len()]) }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        if let Some(t) = &self.bound.borrow()[id.0] {
            return t.clone();
        }
        let p = self.store.get(id);
        let t = Tensor::new(&p.shape, p.values.clone()).expect("stored shape is consistent");
        let t = if self.trainable { self.tape.leaf(&t) } else { t };
        self.bound.borrow_mut()[id.0] = Some(t.clone());
        t
    }

    /// Gradient per parameter, zeros for parameters the pass did not touch.
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .zip(bound.iter())
            .map(|(p, t)| match t {
                Some(t) => grads.wrt(t),
                None => vec![0.0; p.values.len()],
            })
            .collect()
    }
}
