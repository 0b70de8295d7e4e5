//! Per-token explanation weights.
//!
//! Every explainer reads one [`AttentionTrace`] (a traced forward pass) and
//! returns signed weights, one per input token, for the predicted class.
//! Integrated gradients additionally needs the model for its interpolated
//! forward passes.

pub mod lrp;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MASK;
use crate::error::{invalid, Error, Result};
use crate::layers::AttentionRecord;
use crate::models::{Classifier, ClassScore, Family, ModelInput, AttentionTrace};
use crate::tensor::{Tape, Tensor};

pub use lrp::{propagate, RelevanceMap, DEFAULT_EPSILON};

/// Explanation methods, including the attention-gradient ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    RawAtt,
    AttGrad,
    AttIn,
    InputGrad,
    Ig,
    Plrp,
    Rollout,
    TransAtt,
    GenAtt,
    AttGradSign,
    AttGradAbs,
    Random,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::RawAtt,
        Method::AttGrad,
        Method::AttIn,
        Method::InputGrad,
        Method::Ig,
        Method::Plrp,
        Method::Rollout,
        Method::TransAtt,
        Method::GenAtt,
        Method::AttGradSign,
        Method::AttGradAbs,
        Method::Random,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::RawAtt => "rawatt",
            Method::AttGrad => "attgrad",
            Method::AttIn => "attin",
            Method::InputGrad => "inputgrad",
            Method::Ig => "ig",
            Method::Plrp => "plrp",
            Method::Rollout => "rollout",
            Method::TransAtt => "transatt",
            Method::GenAtt => "genatt",
            Method::AttGradSign => "attgrad-sign",
            Method::AttGradAbs => "attgrad-abs",
            Method::Random => "random",
        }
    }

    /// Methods that only exist for multi-layer transformers.
    pub fn transformer_only(self) -> bool {
        matches!(self, Method::Plrp | Method::Rollout | Method::TransAtt | Method::GenAtt)
    }

    /// Methods whose weights are never negative.
    pub fn single_polarity(self) -> bool {
        matches!(self, Method::RawAtt | Method::AttIn | Method::Rollout)
    }

    pub fn applicable(self, family: Family) -> bool {
        match family {
            Family::Transformer => true,
            Family::General => !self.transformer_only(),
            Family::Linear => matches!(self, Method::InputGrad | Method::Ig | Method::Random),
        }
    }

    /// Applicable methods for a model family, in canonical order.
    pub fn for_family(family: Family) -> Vec<Method> {
        Method::ALL.into_iter().filter(|m| m.applicable(family)).collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| invalid(format!("unknown explanation method `{s}`")))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Method> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.id().to_string()
    }
}

/// Integrated-gradients reference input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// MASK-token embedding at every position.
    #[default]
    Mask,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub score: ClassScore,
    pub ig_steps: usize,
    pub baseline: Baseline,
    pub lrp_eps: f64,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { score: ClassScore::Logit, ig_steps: 32, baseline: Baseline::Mask, lrp_eps: DEFAULT_EPSILON, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub method: Method,
    pub target: usize,
    pub weights: Vec<f64>,
    /// How layers and heads were combined.
    pub aggregation: String,
}

impl Explanation {
    fn new(method: Method, target: usize, weights: Vec<f64>, aggregation: impl Into<String>) -> Result<Explanation> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(invalid(format!("{method} produced a non-finite weight at token {i}")));
        }
        Ok(Explanation { method, target, weights, aggregation: aggregation.into() })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0)
    }
}

fn last_layer(trace: &AttentionTrace) -> Result<&AttentionRecord> {
    trace.cache.last().ok_or_else(|| Error::NotApplicable { method: "attention explanation".into(), model: "model without attention".into() })
}

/// The explained row of one head: query row restricted to input keys.
fn explained_row<'a>(rec: &AttentionRecord, values: &'a [f64], n_keys: usize, n_tokens: usize) -> &'a [f64] {
    let start = rec.query_row * n_keys + rec.input_offset;
    &values[start..start + n_tokens]
}

/// Mean over the last layer's heads of `f(α_row, ∇α_row, ‖v‖_row)`.
fn head_mean(
    trace: &AttentionTrace,
    grads: Option<ClassScore>,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Vec<f64>> {
    let rec = last_layer(trace)?;
    let layer = trace.cache.attention.len() - 1;
    let n = trace.tokens.len();
    let mut acc = vec![0.0; n];
    for (h, head) in rec.heads.iter().enumerate() {
        let k = head.n_keys();
        let alpha = explained_row(rec, head.alpha.values(), k, n);
        let grad = match grads {
            Some(score) => trace.alpha_grad(layer, h, score)?,
            None => vec![0.0; head.alpha.len()],
        };
        let grad = explained_row(rec, &grad, k, n);
        let norms = &head.value_norms[rec.input_offset..rec.input_offset + n];
        for i in 0..n {
            acc[i] += f(alpha[i], grad[i], norms[i]);
        }
    }
    let h = rec.heads.len() as f64;
    Ok(acc.into_iter().map(|v| v / h).collect())
}

fn head_note(trace: &AttentionTrace) -> &'static str {
    match trace.family {
        Family::Transformer => "last layer, classification-token row, mean over heads",
        _ => "single attention module",
    }
}

fn require(method: Method, trace: &AttentionTrace) -> Result<()> {
    if method.applicable(trace.family) {
        Ok(())
    } else {
        Err(Error::NotApplicable { method: method.id().into(), model: format!("{:?}", trace.family).to_lowercase() })
    }
}

pub fn raw_att(trace: &AttentionTrace) -> Result<Explanation> {
    require(Method::RawAtt, trace)?;
    let w = head_mean(trace, None, |a, _, _| a)?;
    Explanation::new(Method::RawAtt, trace.predicted, w, head_note(trace))
}

pub fn att_grad(trace: &AttentionTrace, score: ClassScore) -> Result<Explanation> {
    require(Method::AttGrad, trace)?;
    let w = head_mean(trace, Some(score), |a, g, _| a * g)?;
    Explanation::new(Method::AttGrad, trace.predicted, w, head_note(trace))
}

pub fn att_input_norm(trace: &AttentionTrace) -> Result<Explanation> {
    require(Method::AttIn, trace)?;
    let w = head_mean(trace, None, |a, _, v| a * v)?;
    Explanation::new(Method::AttIn, trace.predicted, w, head_note(trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Sign,
    Abs,
}

pub fn att_grad_ablation(trace: &AttentionTrace, variant: AblationVariant, score: ClassScore) -> Result<Explanation> {
    let (method, w) = match variant {
        AblationVariant::Sign => (Method::AttGradSign, head_mean(trace, Some(score), |a, g, _| a * sign(g))?),
        AblationVariant::Abs => (Method::AttGradAbs, head_mean(trace, Some(score), |a, g, _| a * g.abs())?),
    };
    require(method, trace)?;
    Explanation::new(method, trace.predicted, w, head_note(trace))
}

/// Sign with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-token sums of `x ⊙ g` over the embedding dimension.
fn token_sums(x: &[f64], g: &[f64], dim: usize) -> Vec<f64> {
    x.chunks(dim).zip(g.chunks(dim)).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect()
}

pub fn input_grad(trace: &AttentionTrace, score: ClassScore) -> Result<Explanation> {
    let g = trace.gradients(score)?.wrt(&trace.embeddings);
    let dim = trace.embeddings.cols();
    let w = token_sums(trace.embeddings.values(), &g, dim);
    Explanation::new(Method::InputGrad, trace.predicted, w, "embedding dimensions summed")
}

/// `∂ score(target) / ∂ embeddings` at `embeddings`.
fn embedding_gradient(model: &dyn Classifier, tokens: &[usize], embeddings: &Tensor, target: usize, score: ClassScore) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let e = tape.leaf(embeddings);
    let pass = model.forward(&tape, &ModelInput { tokens, embeddings: Some(e.clone()), mask: None }, false)?;
    let root = match score {
        ClassScore::Logit => tape.pick(&pass.logits, target)?,
        ClassScore::Probability => tape.pick(&tape.softmax(&pass.logits, 0)?, target)?,
    };
    let value = root.item();
    Ok((value, tape.backward(&root)?.wrt(&e)))
}

/// Reference input for integrated gradients.
pub fn baseline_embeddings(model: &dyn Classifier, n_tokens: usize, baseline: Baseline) -> Result<Tensor> {
    match baseline {
        Baseline::Mask => model.embed(&vec![MASK; n_tokens]),
        Baseline::Zero => Ok(Tensor::zeros(&[n_tokens, model.embed_dim()])),
    }
}

/// Integrated gradients of `score(target)` from `baseline` to the input,
/// trapezoid rule over `steps` intervals.
pub fn integrated_gradients(
    model: &dyn Classifier,
    tokens: &[usize],
    target: usize,
    baseline: &Tensor,
    steps: usize,
    score: ClassScore,
) -> Result<Explanation> {
    if steps < 8 {
        return Err(invalid(format!("integrated gradients needs at least 8 steps, got {steps}")));
    }
    let x = model.embed(tokens)?;
    if baseline.shape() != x.shape() {
        return Err(Error::Shape { op: "integrated_gradients baseline", shapes: vec![baseline.shape().to_vec(), x.shape().to_vec()] });
    }
    let (xv, bv) = (x.values(), baseline.values());
    let diff: Vec<f64> = xv.iter().zip(bv).map(|(a, b)| a - b).collect();
    let mut avg = vec![0.0; xv.len()];
    for k in 0..=steps {
        let s = k as f64 / steps as f64;
        let point: Vec<f64> = bv.iter().zip(&diff).map(|(b, d)| b + s * d).collect();
        let (_, g) = embedding_gradient(model, tokens, &Tensor::new(x.shape(), point)?, target, score)?;
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 } / steps as f64;
        avg.iter_mut().zip(&g).for_each(|(a, gi)| *a += w * gi);
    }
    let weights = token_sums(&diff, &avg, x.cols());
    Explanation::new(Method::Ig, target, weights, format!("{steps} trapezoid steps"))
}

/// Relevance of every traced node for the predicted logit.
pub fn propagate_relevance(trace: &AttentionTrace, eps: f64) -> Result<RelevanceMap> {
    let tape = trace.tape()?;
    let root = tape.pick(&trace.logits_tensor, trace.predicted)?;
    lrp::propagate(tape, &root, &[root.item()], &[&trace.embeddings], eps)
}

/// Per-layer head-mean of `R^α`, `[keys, keys]` each.
fn attention_relevance(trace: &AttentionTrace, map: &RelevanceMap) -> Result<Vec<Vec<Vec<f64>>>> {
    trace
        .cache
        .attention
        .iter()
        .enumerate()
        .map(|(l, rec)| {
            rec.heads
                .iter()
                .enumerate()
                .map(|(h, head)| {
                    map.readout(&head.alpha)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| Error::MissingCache(format!("attention relevance of layer {l} head {h}")))
                })
                .collect()
        })
        .collect()
}

pub fn plrp(trace: &AttentionTrace, eps: f64) -> Result<Explanation> {
    require(Method::Plrp, trace)?;
    let map = propagate_relevance(trace, eps)?;
    let per_layer = attention_relevance(trace, &map)?;
    let rec = last_layer(trace)?;
    let heads = per_layer.last().expect("non-empty cache");
    let n = trace.tokens.len();
    let k = rec.heads[0].n_keys();
    let mut w = vec![0.0; n];
    for r in heads {
        explained_row(rec, r, k, n).iter().zip(&mut w).for_each(|(v, a)| *a += v);
    }
    let w = w.into_iter().map(|v| v / heads.len() as f64).collect();
    Explanation::new(Method::Plrp, trace.predicted, w, "last layer R^α, classification-token row, mean over heads")
}

/// Square matrix helpers for the layer aggregation methods.
fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    (0..n).for_each(|i| m[i * n + i] = 1.0);
    m
}

fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for p in 0..n {
            let aip = a[i * n + p];
            if aip != 0.0 {
                for j in 0..n {
                    c[i * n + j] += aip * b[p * n + j];
                }
            }
        }
    }
    c
}

fn normalize_rows(m: &mut [f64], n: usize) {
    for row in m.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// `R = Â_L · … · Â_1` with `Â_l = normalize_rows(a·I + b·A_l)`, read at the
/// classification-token row over input tokens.
fn aggregate_layers(trace: &AttentionTrace, per_layer: &[Vec<f64>], self_weight: f64, att_weight: f64) -> Vec<f64> {
    let rec = last_layer(trace).expect("transformer trace");
    let k = rec.heads[0].n_keys();
    let mut r = identity(k);
    for a in per_layer {
        let mut step = identity(k);
        step.iter_mut().for_each(|v| *v *= self_weight);
        step.iter_mut().zip(a).for_each(|(s, v)| *s += att_weight * v);
        normalize_rows(&mut step, k);
        r = matmul_square(&step, &r, k);
    }
    explained_row(rec, &r, k, trace.tokens.len()).to_vec()
}

/// Per-layer head mean of `f(α, ∇α, R^α)` over full attention matrices.
fn layer_maps(
    trace: &AttentionTrace,
    score: Option<ClassScore>,
    relevance: Option<&[Vec<Vec<f64>>]>,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(trace.cache.attention.len());
    for (l, rec) in trace.cache.attention.iter().enumerate() {
        let size = rec.heads[0].alpha.len();
        let mut acc = vec![0.0; size];
        for (h, head) in rec.heads.iter().enumerate() {
            let grad = match score {
                Some(s) => trace.alpha_grad(l, h, s)?,
                None => vec![0.0; size],
            };
            let rel = relevance.map(|r| r[l][h].as_slice());
            for i in 0..size {
                acc[i] += f(head.alpha.values()[i], grad[i], rel.map_or(0.0, |r| r[i]));
            }
        }
        let heads = rec.heads.len() as f64;
        acc.iter_mut().for_each(|v| *v /= heads);
        out.push(acc);
    }
    Ok(out)
}

pub fn rollout(trace: &AttentionTrace) -> Result<Explanation> {
    require(Method::Rollout, trace)?;
    let maps = layer_maps(trace, None, None, |a, _, _| a)?;
    let w = aggregate_layers(trace, &maps, 0.5, 0.5);
    Explanation::new(Method::Rollout, trace.predicted, w, "rollout of 0.5·mean-head α + 0.5·I over all layers")
}

pub fn trans_att(trace: &AttentionTrace, score: ClassScore, eps: f64) -> Result<Explanation> {
    require(Method::TransAtt, trace)?;
    let map = propagate_relevance(trace, eps)?;
    let relevance = attention_relevance(trace, &map)?;
    let maps = layer_maps(trace, Some(score), Some(&relevance), |_, g, r| (g * r).max(0.0))?;
    let w = aggregate_layers(trace, &maps, 1.0, 1.0);
    Explanation::new(Method::TransAtt, trace.predicted, w, "relu(∇α ⊙ R^α) head mean, product of normalize(I + A) over layers")
}

pub fn gen_att(trace: &AttentionTrace, score: ClassScore) -> Result<Explanation> {
    require(Method::GenAtt, trace)?;
    let maps = layer_maps(trace, Some(score), None, |a, g, _| (a * g).max(0.0))?;
    let w = aggregate_layers(trace, &maps, 1.0, 1.0);
    Explanation::new(Method::GenAtt, trace.predicted, w, "relu(α ⊙ ∇α) head mean, product of normalize(I + A) over layers")
}

/// I.i.d. uniform(−1, 1) weights.
pub fn random_explanation(n_tokens: usize, target: usize, seed: u64) -> Explanation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..n_tokens).map(|_| rng.random_range(-1.0..1.0)).collect();
    Explanation { method: Method::Random, target, weights, aggregation: "uniform(-1, 1)".into() }
}

/// Seed of the random baseline for one example.
pub fn example_seed(seed: u64, example: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (example as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Run `method` on a traced example. `example` only seeds the random baseline.
pub fn explain(model: &dyn Classifier, trace: &AttentionTrace, method: Method, cfg: &ExplainConfig, example: usize) -> Result<Explanation> {
    require(method, trace)?;
    match method {
        Method::RawAtt => raw_att(trace),
        Method::AttGrad => att_grad(trace, cfg.score),
        Method::AttIn => att_input_norm(trace),
        Method::InputGrad => input_grad(trace, cfg.score),
        Method::Ig => {
            let base = baseline_embeddings(model, trace.tokens.len(), cfg.baseline)?;
            integrated_gradients(model, &trace.tokens, trace.predicted, &base, cfg.ig_steps, cfg.score)
        }
        Method::Plrp => plrp(trace, cfg.lrp_eps),
        Method::Rollout => rollout(trace),
        Method::TransAtt => trans_att(trace, cfg.score, cfg.lrp_eps),
        Method::GenAtt => gen_att(trace, cfg.score),
        Method::AttGradSign => att_grad_ablation(trace, AblationVariant::Sign, cfg.score),
        Method::AttGradAbs => att_grad_ablation(trace, AblationVariant::Abs, cfg.score),
        Method::Random => Ok(random_explanation(trace.tokens.len(), trace.predicted, example_seed(cfg.seed, example))),
    }
}

#[derive(Serialize)]
struct ExportRow<'a> {
    example_id: &'a str,
    method: Method,
    target: usize,
    weights: &'a [f64],
}

/// One JSON object per line: example id, method, target class and weights.
pub fn write_jsonl<'a, W: Write>(out: &mut W, rows: impl IntoIterator<Item = (&'a str, &'a Explanation)>) -> Result<()> {
    for (id, e) in rows {
        let row = ExportRow { example_id: id, method: e.method, target: e.target, weights: &e.weights };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
