//! Model zoo, trainer, checkpoints and traced prediction.
//!
//! The zoo covers LSTM and CNN encoders with additive (`tanh`) or scaled
//! dot-product attention, plus a small post-norm transformer encoder that
//! classifies from a prepended classification token. All of them expose
//! their attention internals through [`ForwardPass::cache`].

use std::cell::OnceCell;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Vocab, MASK, MAX_LEN};
use crate::error::{invalid, Error, Result};
use crate::layers::{
    cnn_encode, dot_attention, lstm_encode, multi_head_self_attention, tanh_attention, AttentionRecord, CnnParams,
    FeedForward, HeadRecord, KeyMask, LayerActivationCache, Linear, LstmParams, MultiHeadParams, TanhAttentionParams,
};
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::tensor::{Gradients, Tape, Tensor};

pub mod linear;
pub use linear::LinearSoftmaxModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Lstm,
    Cnn,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Tanh,
    Dot,
    MultiHead,
}

/// Coarse model family, used by explainers to pick a row convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Single attention module with one query over encoder states.
    General,
    /// Stacked self-attention with a classification token at position 0.
    Transformer,
    /// No attention at all.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub encoder: EncoderKind,
    pub attention: AttentionKind,
    /// Encoder layers (transformer only; general models have one encoder).
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub kernel_width: usize,
    /// Stacked tanh layers in the classifier head.
    pub head_depth: usize,
    pub classes: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            encoder: EncoderKind::Lstm,
            attention: AttentionKind::Tanh,
            layers: 2,
            heads: 2,
            embed_dim: 64,
            hidden_dim: 64,
            kernel_width: 3,
            head_depth: 1,
            classes: 2,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn name(&self) -> String {
        match self.encoder {
            EncoderKind::Transformer => "transformer".to_string(),
            EncoderKind::Lstm | EncoderKind::Cnn => format!(
                "{}-{}",
                match self.encoder {
                    EncoderKind::Lstm => "lstm",
                    _ => "cnn",
                },
                match self.attention {
                    AttentionKind::Tanh => "tanh",
                    _ => "dot",
                }
            ),
        }
    }

    pub fn family(&self) -> Family {
        match self.encoder {
            EncoderKind::Transformer => Family::Transformer,
            _ => Family::General,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_pair = matches!(
            (self.encoder, self.attention),
            (EncoderKind::Lstm | EncoderKind::Cnn, AttentionKind::Tanh | AttentionKind::Dot)
                | (EncoderKind::Transformer, AttentionKind::MultiHead)
        );
        if !ok_pair {
            return Err(invalid(format!("{:?} encoder cannot use {:?} attention", self.encoder, self.attention)));
        }
        if self.head_depth == 0 || self.layers == 0 {
            return Err(invalid("depth must be at least 1"));
        }
        if self.classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if self.vocab_size <= MASK {
            return Err(invalid("vocabulary must contain the reserved ids"));
        }
        if self.encoder == EncoderKind::Cnn && self.kernel_width % 2 == 0 {
            return Err(invalid("cnn kernel width must be odd to keep one output per token"));
        }
        if self.encoder == EncoderKind::Transformer && (self.heads == 0 || self.embed_dim % self.heads != 0) {
            return Err(invalid("transformer width must be divisible by the head count"));
        }
        Ok(())
    }

    /// The four general attention models plus the transformer.
    pub fn zoo(base: &ModelSpec) -> Vec<ModelSpec> {
        let mut out = Vec::new();
        for encoder in [EncoderKind::Lstm, EncoderKind::Cnn] {
            for attention in [AttentionKind::Tanh, AttentionKind::Dot] {
                out.push(ModelSpec { encoder, attention, ..base.clone() });
            }
        }
        out.push(ModelSpec { encoder: EncoderKind::Transformer, attention: AttentionKind::MultiHead, ..base.clone() });
        out
    }

    pub fn general_zoo(base: &ModelSpec) -> Vec<ModelSpec> {
        ModelSpec::zoo(base).into_iter().filter(|s| s.family() == Family::General).collect()
    }
}

/// Input of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ModelInput<'a> {
    pub tokens: &'a [usize],
    /// `[N, E]` embeddings replacing the table lookup (used to differentiate
    /// with respect to inputs and for interpolated inputs).
    pub embeddings: Option<Tensor>,
    /// Attention-mask perturbation over the input tokens.
    pub mask: Option<&'a KeyMask>,
}

impl<'a> ModelInput<'a> {
    pub fn tokens(tokens: &'a [usize]) -> Self {
        ModelInput { tokens, embeddings: None, mask: None }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub embeddings: Tensor,
    pub logits: Tensor,
    pub cache: LayerActivationCache,
}

/// Anything the explainers and metrics can evaluate: `f(·)` with its internals.
pub trait Classifier: Sync {
    fn name(&self) -> String;
    fn family(&self) -> Family;
    fn num_classes(&self) -> usize;
    fn embed_dim(&self) -> usize;
    /// Constant `[N, E]` input embeddings for `tokens`.
    fn embed(&self, tokens: &[usize]) -> Result<Tensor>;
    fn forward(&self, tape: &Tape, input: &ModelInput, trainable: bool) -> Result<ForwardPass>;

    /// Post-softmax class confidences without recording anything.
    fn confidence(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let pass = self.forward(&tape, input, false)?;
        Ok(softmax(pass.logits.values()))
    }

    fn logits(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let tape = Tape::new();
        Ok(self.forward(&tape, input, false)?.logits.values().to_vec())
    }

    fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(&self.confidence(&ModelInput::tokens(tokens))?))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
enum Encoder {
    Lstm(LstmParams),
    Cnn(CnnParams),
    Transformer { cls: ParamId, positions: ParamId, blocks: Vec<(MultiHeadParams, FeedForward)> },
}

#[derive(Clone, Debug)]
enum Pooling {
    Tanh(TanhAttentionParams),
    Dot,
    ClassToken,
}

/// Parameter layout of a zoo model; rebuilt deterministically from its spec.
#[derive(Clone, Debug)]
struct Network {
    embedding: ParamId,
    encoder: Encoder,
    pooling: Pooling,
    head: Vec<Linear>,
    output: Linear,
}

impl Network {
    fn build(spec: &ModelSpec) -> Result<(Network, ParamStore)> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let (e, h) = (spec.embed_dim, spec.hidden_dim);
        let embedding = store.add("embedding", &[spec.vocab_size, e], Init::Normal(0.1), &mut rng);
        let (encoder, width) = match spec.encoder {
            EncoderKind::Lstm => (Encoder::Lstm(LstmParams::new(&mut store, "lstm", e, h, &mut rng)), h),
            EncoderKind::Cnn => {
                (Encoder::Cnn(CnnParams::new(&mut store, "cnn", e, h, spec.kernel_width, &mut rng)), h)
            }
            EncoderKind::Transformer => {
                let cls = store.add("cls", &[1, e], Init::Normal(0.1), &mut rng);
                let positions = store.add("positions", &[MAX_LEN + 1, e], Init::Normal(0.1), &mut rng);
                let mut blocks = Vec::with_capacity(spec.layers);
                for l in 0..spec.layers {
                    let att = MultiHeadParams::new(&mut store, &format!("block{l}.attention"), e, spec.heads, &mut rng)?;
                    let ffn = FeedForward::new(&mut store, &format!("block{l}.ffn"), e, h, &mut rng);
                    blocks.push((att, ffn));
                }
                (Encoder::Transformer { cls, positions, blocks }, e)
            }
        };
        let pooling = match spec.attention {
            AttentionKind::Tanh => Pooling::Tanh(TanhAttentionParams::new(&mut store, "attention", width, width, width, &mut rng)),
            AttentionKind::Dot => Pooling::Dot,
            AttentionKind::MultiHead => Pooling::ClassToken,
        };
        let head = (0..spec.head_depth)
            .map(|i| Linear::new(&mut store, &format!("head{i}"), width, width, true, &mut rng))
            .collect();
        let output = Linear::new(&mut store, "output", width, spec.classes, true, &mut rng);
        Ok((Network { embedding, encoder, pooling, head, output }, store))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub seed: u64,
    pub losses: Vec<f64>,
    /// Set when the accuracy floor was not reached.
    pub below_floor: bool,
}

/// A zoo model with its parameters and vocabulary.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub vocab: Vocab,
    pub meta: TrainingMeta,
    network: Network,
}

impl TrainedModel {
    /// Freshly initialized, untrained model.
    pub fn init(spec: &ModelSpec, vocab: &Vocab) -> Result<TrainedModel> {
        let spec = ModelSpec { vocab_size: vocab.len(), ..spec.clone() };
        let (network, params) = Network::build(&spec)?;
        Ok(TrainedModel {
            meta: TrainingMeta {
                epochs: 0,
                train_accuracy: 0.0,
                val_accuracy: None,
                seed: spec.seed,
                losses: vec![],
                below_floor: false,
            },
            spec,
            params,
            vocab: vocab.clone(),
            network,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("empty example"));
        }
        if tokens.len() > MAX_LEN {
            return Err(invalid(format!("example longer than {MAX_LEN} tokens")));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.spec.vocab_size) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {}", self.spec.vocab_size)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: self.spec.clone(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
            params: self.params.clone(),
        };
        fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        let text = fs::read_to_string(path)?;
        let mut ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", ck.format)));
        }
        ck.vocab.reindex();
        let mut model = TrainedModel::init(&ck.spec, &ck.vocab)?;
        model.spec = ck.spec;
        model.params.load_values(&ck.params)?;
        model.meta = ck.meta;
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "faithbench-checkpoint-v1";

/// Self-describing checkpoint: spec, vocabulary and named parameter arrays
/// with their shapes.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    spec: ModelSpec,
    vocab: Vocab,
    meta: TrainingMeta,
    params: ParamStore,
}

impl Classifier for TrainedModel {
    fn name(&self) -> String {
        self.spec.name()
    }

    fn family(&self) -> Family {
        self.spec.family()
    }

    fn num_classes(&self) -> usize {
        self.spec.classes
    }

    fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let table = self.params.get(self.network.embedding);
        let e = self.spec.embed_dim;
        let mut values = Vec::with_capacity(tokens.len() * e);
        for &t in tokens {
            values.extend_from_slice(&table.values[t * e..(t + 1) * e]);
        }
        Tensor::new(&[tokens.len(), e], values)
    }

    fn forward(&self, tape: &Tape, input: &ModelInput, trainable: bool) -> Result<ForwardPass> {
        self.forward_graph(&Graph::new(tape, &self.params, trainable), input)
    }
}

impl TrainedModel {
    fn forward_graph(&self, g: &Graph, input: &ModelInput) -> Result<ForwardPass> {
        self.check_tokens(input.tokens)?;
        let tape = g.tape;
        let trainable = g.trainable();
        let n = input.tokens.len();
        if let Some(m) = input.mask {
            if m.len() != n {
                return Err(invalid(format!("mask of length {} for {n} tokens", m.len())));
            }
        }
        let net = &self.network;
        let embeddings = match &input.embeddings {
            Some(e) => {
                if e.shape() != [n, self.spec.embed_dim] {
                    return Err(Error::Shape { op: "forward", shapes: vec![e.shape().to_vec(), vec![n, self.spec.embed_dim]] });
                }
                e.clone()
            }
            None if trainable => tape.embedding_lookup(&g.param(net.embedding), input.tokens)?,
            None => self.embed(input.tokens)?,
        };
        let mut cache = LayerActivationCache::default();
        let pooled = match (&net.encoder, &net.pooling) {
            (Encoder::Lstm(_) | Encoder::Cnn(_), pooling) => {
                let (keys, query) = match &net.encoder {
                    Encoder::Lstm(p) => lstm_encode(g, p, &embeddings)?,
                    Encoder::Cnn(p) => {
                        let keys = cnn_encode(g, p, &embeddings, p.width / 2)?;
                        let query = masked_mean(tape, &keys, input.mask)?;
                        (keys, query)
                    }
                    Encoder::Transformer { .. } => unreachable!(),
                };
                let out = match pooling {
                    Pooling::Tanh(p) => tanh_attention(g, p, &query, &keys, input.mask)?,
                    Pooling::Dot => {
                        let scale = 1.0 / (keys.cols() as f64).sqrt();
                        dot_attention(tape, &query, &keys, &keys, scale, input.mask)?
                    }
                    Pooling::ClassToken => unreachable!(),
                };
                cache.attention.push(AttentionRecord {
                    heads: vec![HeadRecord {
                        value_norms: crate::layers::row_norms(&keys),
                        alpha: out.alpha,
                        scores: out.scores,
                        values: keys,
                    }],
                    query_row: 0,
                    input_offset: 0,
                });
                out.context
            }
            (Encoder::Transformer { cls, positions, blocks }, _) => {
                let seq = tape.concat(&[&g.param(*cls), &embeddings], 0)?;
                let pos = tape.slice(&g.param(*positions), 0, 0, n + 1)?;
                let mut x = tape.add(&seq, &pos)?;
                let mask = input.mask.map(|m| m.with_prefix(1));
                for (att, ffn) in blocks {
                    let (y, mut rec) = multi_head_self_attention(g, att, &x, mask.as_ref())?;
                    rec.query_row = 0;
                    rec.input_offset = 1;
                    cache.attention.push(rec);
                    x = ffn.forward(g, &y)?;
                }
                tape.reshape(&tape.slice(&x, 0, 0, 1)?, &[self.spec.embed_dim])?
            }
        };
        let mut h = pooled;
        for layer in &net.head {
            h = tape.tanh(&layer.forward(g, &h)?)?;
        }
        let logits = net.output.forward(g, &h)?;
        Ok(ForwardPass { embeddings, logits, cache })
    }
}

/// Mean over rows; under an attention mask only kept rows contribute, divided
/// by the kept count when renormalizing and by the full length otherwise.
fn masked_mean(tape: &Tape, x: &Tensor, mask: Option<&KeyMask>) -> Result<Tensor> {
    match mask {
        None => tape.mean(x, Some(0)),
        Some(m) => {
            let kept: Vec<usize> = (0..m.len()).filter(|&i| m.keep[i]).collect();
            if kept.is_empty() {
                return Err(invalid("attention mask removes every token"));
            }
            let rows = tape.gather(x, &kept)?;
            if m.renormalize {
                tape.mean(&rows, Some(0))
            } else {
                tape.scale(&tape.sum(&rows, Some(0))?, 1.0 / m.len() as f64)
            }
        }
    }
}

/// Which scalar the explanation gradients differentiate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassScore {
    /// Pre-softmax logit of the predicted class.
    #[default]
    Logit,
    /// Post-softmax probability of the predicted class.
    Probability,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// Every cached attention matrix, in (layer, head) order.
    Alpha,
    InputEmbeddings,
}

/// One traced forward pass on a live tape.
pub struct AttentionTrace {
    tape: Option<Tape>,
    pub tokens: Vec<usize>,
    pub family: Family,
    pub embeddings: Tensor,
    pub logits_tensor: Tensor,
    pub cache: LayerActivationCache,
    pub logits: Vec<f64>,
    pub confidence: Vec<f64>,
    pub predicted: usize,
    grads: [OnceCell<Gradients>; 2],
}

impl std::fmt::Debug for AttentionTrace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttentionTrace")
            .field("tokens", &self.tokens)
            .field("predicted", &self.predicted)
            .field("confidence", &self.confidence)
            .finish_non_exhaustive()
    }
}

/// Forward `tokens` with differentiable input embeddings and a full cache.
pub fn predict_traced(model: &dyn Classifier, tokens: &[usize]) -> Result<AttentionTrace> {
    if tokens.is_empty() {
        return Err(invalid("empty example"));
    }
    let tape = Tape::new();
    let embeddings = tape.leaf(&model.embed(tokens)?);
    let input = ModelInput { tokens, embeddings: Some(embeddings), mask: None };
    let pass = model.forward(&tape, &input, false)?;
    let logits = pass.logits.values().to_vec();
    let confidence = softmax(&logits);
    let predicted = argmax(&confidence);
    Ok(AttentionTrace {
        tape: Some(tape),
        tokens: tokens.to_vec(),
        family: model.family(),
        embeddings: pass.embeddings,
        logits_tensor: pass.logits,
        cache: pass.cache,
        logits,
        confidence,
        predicted,
        grads: [OnceCell::new(), OnceCell::new()],
    })
}

impl AttentionTrace {
    pub fn tape(&self) -> Result<&Tape> {
        self.tape.as_ref().ok_or(Error::TapeConsumed)
    }

    /// Drop the tape; the recorded values stay readable but no more gradients.
    pub fn consume(&mut self) {
        self.tape = None;
        self.grads = [OnceCell::new(), OnceCell::new()];
    }

    pub fn gradients(&self, score: ClassScore) -> Result<&Gradients> {
        let tape = self.tape()?;
        let slot = &self.grads[score as usize];
        if let Some(g) = slot.get() {
            return Ok(g);
        }
        let root = match score {
            ClassScore::Logit => tape.pick(&self.logits_tensor, self.predicted)?,
            ClassScore::Probability => {
                let p = tape.softmax(&self.logits_tensor, 0)?;
                tape.pick(&p, self.predicted)?
            }
        };
        let g = tape.backward(&root)?;
        Ok(slot.get_or_init(|| g))
    }

    /// `∂ score(ŷ) / ∂ target`, one array per target tensor.
    pub fn grad_wrt(&self, target: GradTarget, score: ClassScore) -> Result<Vec<Vec<f64>>> {
        let grads = self.gradients(score)?;
        Ok(match target {
            GradTarget::InputEmbeddings => vec![grads.wrt(&self.embeddings)],
            GradTarget::Alpha => self
                .cache
                .attention
                .iter()
                .flat_map(|rec| rec.heads.iter().map(|h| grads.wrt(&h.alpha)))
                .collect(),
        })
    }

    /// Gradient of the score with respect to one head's α.
    pub fn alpha_grad(&self, layer: usize, head: usize, score: ClassScore) -> Result<Vec<f64>> {
        let rec = self.cache.attention.get(layer).ok_or_else(|| Error::MissingCache(format!("attention layer {layer}")))?;
        let h = rec.heads.get(head).ok_or_else(|| Error::MissingCache(format!("head {head} of layer {layer}")))?;
        Ok(self.gradients(score)?.wrt(&h.alpha))
    }

    pub fn predicted_logit(&self) -> f64 {
        self.logits[self.predicted]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Early stop after this many epochs without accuracy improvement.
    pub patience: usize,
    pub accuracy_floor: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { max_epochs: 30, learning_rate: 1e-3, batch_size: 16, patience: 3, accuracy_floor: 0.85, clip_norm: 5.0 }
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Adam { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p.values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
    }
}

/// Cross-entropy loss and parameter gradients for one example.
fn example_gradients(model: &TrainedModel, tokens: &[usize], label: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let g = Graph::new(&tape, &model.params, true);
    let pass = model.forward_graph(&g, &ModelInput::tokens(tokens))?;
    let log_probs = {
        let m = pass.logits.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted = tape.add(&pass.logits, &Tensor::vector(vec![-m; pass.logits.len()]))?;
        let z = tape.log(&tape.sum(&tape.exp(&shifted)?, None)?)?;
        let picked = tape.pick(&shifted, label)?;
        tape.sub(&picked, &z)?
    };
    let loss = tape.scale(&log_probs, -1.0)?;
    let grads = tape.backward(&loss)?;
    Ok((loss.item(), g.param_gradients(&grads)))
}

pub fn accuracy(model: &dyn Classifier, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Ok(0.0);
    }
    let correct: Result<Vec<bool>> =
        corpus.examples.par_iter().map(|ex| Ok(model.predict(&ex.tokens)? == ex.label)).collect();
    Ok(correct?.iter().filter(|&&c| c).count() as f64 / corpus.len() as f64)
}

/// Supervised training with Adam and accuracy-plateau early stopping. The
/// best epoch's parameters are kept.
pub fn train(train_set: &Corpus, val: Option<&Corpus>, spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    if train_set.is_empty() {
        return Err(invalid("empty training corpus"));
    }
    if let Some(bad) = train_set.examples.iter().find(|e| e.label >= spec.classes) {
        return Err(invalid(format!("label {} outside {} classes", bad.label, spec.classes)));
    }
    let mut model = TrainedModel::init(spec, &train_set.vocab)?;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (f64::NEG_INFINITY, model.params.clone(), 0usize);
    let mut stale = 0;
    let mut losses = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let results: Result<Vec<(f64, Vec<Vec<f64>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train_set.examples[i];
                    example_gradients(&model, &ex.tokens, ex.label)
                })
                .collect();
            let results = results?;
            let mut total: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            for (loss, grads) in &results {
                epoch_loss += loss;
                for (acc, g) in total.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut norm = 0.0;
            for g in total.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                    norm += *v * *v;
                }
            }
            let norm = norm.sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if norm > cfg.clip_norm {
                let c = cfg.clip_norm / norm;
                total.iter_mut().flatten().for_each(|v| *v *= c);
            }
            adam.update(&mut model.params, &total, cfg.learning_rate);
        }
        let mean_loss = epoch_loss / train_set.len() as f64;
        if !mean_loss.is_finite() || !model.params.all_finite() {
            return Err(Error::Divergence { epoch });
        }
        losses.push(mean_loss);
        let score = match val {
            Some(v) if !v.is_empty() => accuracy(&model, v)?,
            _ => accuracy(&model, train_set)?,
        };
        if score > best.0 {
            best = (score, model.params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        if score >= 1.0 || stale >= cfg.patience {
            break;
        }
    }
    model.params = best.1;
    model.meta.epochs = best.2;
    model.meta.losses = losses;
    model.meta.train_accuracy = accuracy(&model, train_set)?;
    model.meta.val_accuracy = match val {
        Some(v) if !v.is_empty() => Some(accuracy(&model, v)?),
        _ => None,
    };
    model.meta.below_floor = model.meta.train_accuracy < cfg.accuracy_floor;
    Ok(model)
}
