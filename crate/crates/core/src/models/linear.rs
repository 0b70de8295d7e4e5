//! Hand-built bag-of-embeddings classifier with antisymmetric logits
//! `[s, −s]`, `s = w · Σ_i x_i`. Its MASK embedding is the zero vector, so
//! masking a token removes exactly its contribution to `s`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Classifier, Family, ForwardPass, ModelInput};
use crate::data::MASK;
use crate::error::{invalid, Error, Result};
use crate::layers::LayerActivationCache;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct LinearSoftmaxModel {
    pub embedding: Vec<f64>,
    pub weight: Vec<f64>,
    pub vocab_size: usize,
    pub dim: usize,
}

impl LinearSoftmaxModel {
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut embedding: Vec<f64> = (0..vocab_size * dim).map(|_| normal.sample(&mut rng)).collect();
        if vocab_size > MASK {
            embedding[MASK * dim..(MASK + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
        }
        let weight = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        LinearSoftmaxModel { embedding, weight, vocab_size, dim }
    }
}

impl Classifier for LinearSoftmaxModel {
    fn name(&self) -> String {
        "linear-softmax".into()
    }

    fn family(&self) -> Family {
        Family::Linear
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(invalid("empty example"));
        }
        let mut values = Vec::with_capacity(tokens.len() * self.dim);
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(invalid(format!("token id {t} outside vocabulary of {}", self.vocab_size)));
            }
            values.extend_from_slice(&self.embedding[t * self.dim..(t + 1) * self.dim]);
        }
        Tensor::new(&[tokens.len(), self.dim], values)
    }

    fn forward(&self, tape: &Tape, input: &ModelInput, _trainable: bool) -> Result<ForwardPass> {
        if input.mask.is_some() {
            return Err(Error::NotApplicable { method: "attention-mask".into(), model: self.name() });
        }
        let embeddings = match &input.embeddings {
            Some(e) => e.clone(),
            None => self.embed(input.tokens)?,
        };
        let summed = tape.sum(&embeddings, Some(0))?;
        let score = tape.sum(&tape.mul(&summed, &Tensor::vector(self.weight.clone()))?, None)?;
        let pos = tape.reshape(&score, &[1])?;
        let neg = tape.scale(&pos, -1.0)?;
        let logits = tape.concat(&[&pos, &neg], 0)?;
        Ok(ForwardPass { embeddings, logits, cache: LayerActivationCache::default() })
    }
}
