//! Encoders and attention modules. Every attention module records its
//! distribution, pre-softmax scores and value vectors in an [`AttentionRecord`].

use rand::Rng;

use crate::error::{invalid, Result};
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which keys survive an attention-mask perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMask {
    pub keep: Vec<bool>,
    /// Renormalize α over the surviving keys instead of zeroing in place.
    pub renormalize: bool,
}

impl KeyMask {
    pub fn keep_all(n: usize) -> Self {
        KeyMask { keep: vec![true; n], renormalize: false }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Same mask with `n` always-kept keys in front (e.g. a classification token).
    pub fn with_prefix(&self, n: usize) -> KeyMask {
        let mut keep = vec![true; n];
        keep.extend_from_slice(&self.keep);
        KeyMask { keep, renormalize: self.renormalize }
    }
}

/// Attention internals of one head.
#[derive(Clone, Debug)]
pub struct HeadRecord {
    /// `[keys]` for a single query, `[queries, keys]` for self-attention.
    pub alpha: Tensor,
    pub scores: Tensor,
    /// Transformed value vectors `v(x)`, `[keys, d_v]`.
    pub values: Tensor,
    /// `‖v(x_i)‖` per key.
    pub value_norms: Vec<f64>,
}

impl HeadRecord {
    fn new(alpha: Tensor, scores: Tensor, values: Tensor) -> Self {
        let value_norms = row_norms(&values);
        HeadRecord { alpha, scores, values, value_norms }
    }

    pub fn n_keys(&self) -> usize {
        self.alpha.cols()
    }

    /// One query row of α.
    pub fn alpha_row(&self, row: usize) -> &[f64] {
        self.alpha.row(row)
    }
}

pub fn row_norms(values: &Tensor) -> Vec<f64> {
    (0..values.rows()).map(|i| values.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// All heads of one attention module.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub heads: Vec<HeadRecord>,
    /// Query row that explanations read from.
    pub query_row: usize,
    /// Index of the first key that corresponds to an input token.
    pub input_offset: usize,
}

/// Attention records of a full forward pass, in execution order.
#[derive(Clone, Debug, Default)]
pub struct LayerActivationCache {
    pub attention: Vec<AttentionRecord>,
}

impl LayerActivationCache {
    pub fn last(&self) -> Option<&AttentionRecord> {
        self.attention.last()
    }
}

/// Affine map `x·W + b` on `[in]` or `[N, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), &[d_in, d_out], Init::Glorot, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[d_out], Init::Zeros, rng));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let y = g.tape.matmul(x, &g.param(self.weight))?;
        match self.bias {
            None => Ok(y),
            Some(b) => {
                let b = g.param(b);
                if y.rank() == 2 {
                    let rep = g.tape.repeat_rows(&b, y.rows())?;
                    g.tape.add(&y, &rep)
                } else {
                    g.tape.add(&y, &b)
                }
            }
        }
    }
}

/// Normalize `scores` over the last axis, honoring an optional key mask.
fn attend(tape: &Tape, scores: &Tensor, mask: Option<&KeyMask>) -> Result<Tensor> {
    let axis = scores.rank() - 1;
    match mask {
        None => tape.softmax(scores, axis),
        Some(m) => {
            if m.len() != scores.cols() {
                return Err(invalid(format!("key mask of length {} for {} keys", m.len(), scores.cols())));
            }
            if m.renormalize {
                tape.masked_softmax(scores, axis, &m.keep)
            } else {
                let alpha = tape.softmax(scores, axis)?;
                let keep: Vec<f64> = m.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                let rows = scores.rows();
                let mut gate = Vec::with_capacity(scores.len());
                for _ in 0..if scores.rank() == 2 { rows } else { 1 } {
                    gate.extend_from_slice(&keep);
                }
                tape.mul(&alpha, &Tensor::new(scores.shape(), gate)?)
            }
        }
    }
}

/// Output of a single-query attention module.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub alpha: Tensor,
    pub scores: Tensor,
    pub context: Tensor,
}

/// Additive attention parameters. The projections are stored input-major
/// (`w2: [d_key, d_att]`, `w3: [d_query, d_att]`) so that scores are
/// `tanh(K·w2 + q·w3)·w1`.
#[derive(Clone, Debug)]
pub struct TanhAttentionParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub d_key: usize,
    pub d_query: usize,
    pub d_att: usize,
}

impl TanhAttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, d_key: usize, d_query: usize, d_att: usize, rng: &mut impl Rng) -> Self {
        TanhAttentionParams {
            w1: store.add(format!("{name}.w1"), &[d_att], Init::Glorot, rng),
            w2: store.add(format!("{name}.w2"), &[d_key, d_att], Init::Glorot, rng),
            w3: store.add(format!("{name}.w3"), &[d_query, d_att], Init::Glorot, rng),
            d_key,
            d_query,
            d_att,
        }
    }
}

/// `α = softmax(w1ᵀ tanh(W2 K + W3 q))`, context `Σ α_i k_i`.
pub fn tanh_attention(
    g: &Graph,
    p: &TanhAttentionParams,
    query: &Tensor,
    keys: &Tensor,
    mask: Option<&KeyMask>,
) -> Result<AttentionOutput> {
    if keys.rank() != 2 || keys.rows() == 0 {
        return Err(invalid("tanh attention needs a non-empty [N, d] key matrix"));
    }
    let t = g.tape;
    let n = keys.rows();
    let projected_keys = t.matmul(keys, &g.param(p.w2))?;
    let projected_query = t.matmul(query, &g.param(p.w3))?;
    let hidden = t.tanh(&t.add(&projected_keys, &t.repeat_rows(&projected_query, n)?)?)?;
    let scores = t.matmul(&hidden, &g.param(p.w1))?;
    let alpha = attend(t, &scores, mask)?;
    let context = t.matmul(&alpha, keys)?;
    Ok(AttentionOutput { alpha, scores, context })
}

/// `α = softmax(scale · q Kᵀ)`, context `α V`. `query` is `[d]` or `[M, d]`.
pub fn dot_attention(
    tape: &Tape,
    query: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    scale: f64,
    mask: Option<&KeyMask>,
) -> Result<AttentionOutput> {
    if keys.rank() != 2 || keys.rows() == 0 || values.rank() != 2 || values.rows() != keys.rows() {
        return Err(crate::Error::Shape {
            op: "dot_attention",
            shapes: vec![query.shape().to_vec(), keys.shape().to_vec(), values.shape().to_vec()],
        });
    }
    let raw = tape.matmul(query, &tape.transpose(keys)?)?;
    let scores = tape.scale(&raw, scale)?;
    let alpha = attend(tape, &scores, mask)?;
    let context = tape.matmul(&alpha, values)?;
    Ok(AttentionOutput { alpha, scores, context })
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Multi-head self-attention block: heads, output projection, residual and
/// layer normalization.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub output: Linear,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub head_dim: usize,
    pub width: usize,
}

impl MultiHeadParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_heads == 0 || width % n_heads != 0 {
            return Err(invalid(format!("width {width} is not divisible by {n_heads} heads")));
        }
        let head_dim = width / n_heads;
        let heads = (0..n_heads)
            .map(|h| HeadParams {
                query: store.add(format!("{name}.h{h}.query"), &[width, head_dim], Init::Glorot, rng),
                key: store.add(format!("{name}.h{h}.key"), &[width, head_dim], Init::Glorot, rng),
                value: store.add(format!("{name}.h{h}.value"), &[width, head_dim], Init::Glorot, rng),
            })
            .collect();
        Ok(MultiHeadParams {
            heads,
            output: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
            norm_gain: store.add(format!("{name}.norm.gain"), &[width], Init::Ones, rng),
            norm_bias: store.add(format!("{name}.norm.bias"), &[width], Init::Zeros, rng),
            head_dim,
            width,
        })
    }
}

/// `LayerNorm(x + MHA(x))`. The record's `query_row`/`input_offset` are left
/// at zero for the caller to set.
pub fn multi_head_self_attention(
    g: &Graph,
    p: &MultiHeadParams,
    x: &Tensor,
    mask: Option<&KeyMask>,
) -> Result<(Tensor, AttentionRecord)> {
    if x.rank() != 2 || x.rows() == 0 || x.cols() != p.width {
        return Err(crate::Error::Shape { op: "multi_head_self_attention", shapes: vec![x.shape().to_vec()] });
    }
    let t = g.tape;
    let scale = 1.0 / (p.head_dim as f64).sqrt();
    let mut contexts = Vec::with_capacity(p.heads.len());
    let mut records = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = t.matmul(x, &g.param(head.query))?;
        let k = t.matmul(x, &g.param(head.key))?;
        let v = t.matmul(x, &g.param(head.value))?;
        let out = dot_attention(t, &q, &k, &v, scale, mask)?;
        contexts.push(out.context);
        records.push(HeadRecord::new(out.alpha, out.scores, v));
    }
    let refs: Vec<&Tensor> = contexts.iter().collect();
    let merged = t.concat(&refs, 1)?;
    let projected = p.output.forward(g, &merged)?;
    let residual = t.add(x, &projected)?;
    let out = t.layer_norm(&residual, &g.param(p.norm_gain), &g.param(p.norm_bias), LAYER_NORM_EPS)?;
    Ok((out, AttentionRecord { heads: records, query_row: 0, input_offset: 0 }))
}

/// Position-wise `LayerNorm(x + W2 relu(W1 x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), width, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, width, true, rng),
            norm_gain: store.add(format!("{name}.norm.gain"), &[width], Init::Ones, rng),
            norm_bias: store.add(format!("{name}.norm.bias"), &[width], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let t = g.tape;
        let h = t.relu(&self.inner.forward(g, x)?)?;
        let y = self.outer.forward(g, &h)?;
        let residual = t.add(x, &y)?;
        t.layer_norm(&residual, &g.param(self.norm_gain), &g.param(self.norm_bias), LAYER_NORM_EPS)
    }
}

/// Single-layer LSTM; gates packed as `[input, forget, cell, output]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        LstmParams {
            input: store.add(format!("{name}.input"), &[d_in, 4 * hidden], Init::Glorot, rng),
            recurrent: store.add(format!("{name}.recurrent"), &[hidden, 4 * hidden], Init::Glorot, rng),
            bias: store.add(format!("{name}.bias"), &[4 * hidden], Init::Zeros, rng),
            hidden,
        }
    }
}

/// Runs the LSTM over `[N, E]` embeddings; returns all hidden states
/// `[N, H]` and the final state `[H]`.
pub fn lstm_encode(g: &Graph, p: &LstmParams, embeddings: &Tensor) -> Result<(Tensor, Tensor)> {
    if embeddings.rank() != 2 || embeddings.rows() == 0 {
        return Err(invalid("lstm needs a non-empty [N, E] sequence"));
    }
    let t = g.tape;
    let hd = p.hidden;
    let n = embeddings.rows();
    let inputs = t.matmul(embeddings, &g.param(p.input))?;
    let recurrent = g.param(p.recurrent);
    let bias = g.param(p.bias);
    let mut h = Tensor::zeros(&[hd]);
    let mut c = Tensor::zeros(&[hd]);
    let mut states = Vec::with_capacity(n);
    for step in 0..n {
        let x_t = t.reshape(&t.slice(&inputs, 0, step, step + 1)?, &[4 * hd])?;
        let z = t.add(&t.add(&x_t, &t.matmul(&h, &recurrent)?)?, &bias)?;
        let i = t.sigmoid(&t.slice(&z, 0, 0, hd)?)?;
        let f = t.sigmoid(&t.slice(&z, 0, hd, 2 * hd)?)?;
        let cand = t.tanh(&t.slice(&z, 0, 2 * hd, 3 * hd)?)?;
        let o = t.sigmoid(&t.slice(&z, 0, 3 * hd, 4 * hd)?)?;
        c = t.add(&t.mul(&f, &c)?, &t.mul(&i, &cand)?)?;
        h = t.mul(&o, &t.tanh(&c)?)?;
        states.push(t.reshape(&h, &[1, hd])?);
    }
    let refs: Vec<&Tensor> = states.iter().collect();
    Ok((t.concat(&refs, 0)?, h))
}

#[derive(Clone, Debug)]
pub struct CnnParams {
    /// `[width, E, F]`
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub filters: usize,
}

impl CnnParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, filters: usize, width: usize, rng: &mut impl Rng) -> Self {
        CnnParams {
            kernel: store.add(format!("{name}.kernel"), &[width, d_in, filters], Init::Glorot, rng),
            bias: store.add(format!("{name}.bias"), &[filters], Init::Zeros, rng),
            width,
            filters,
        }
    }
}

/// `relu(conv1d(pad(x)) + b)` with `padding` zero rows on each side.
pub fn cnn_encode(g: &Graph, p: &CnnParams, embeddings: &Tensor, padding: usize) -> Result<Tensor> {
    if embeddings.rank() != 2 {
        return Err(invalid("cnn needs an [N, E] sequence"));
    }
    let n = embeddings.rows();
    if n + 2 * padding < p.width {
        return Err(invalid(format!("sequence of length {n} is shorter than kernel width {}", p.width)));
    }
    let t = g.tape;
    let padded = if padding > 0 {
        let pad = Tensor::zeros(&[padding, embeddings.cols()]);
        t.concat(&[&pad, embeddings, &pad], 0)?
    } else {
        embeddings.clone()
    };
    let conv = t.conv1d(&padded, &g.param(p.kernel))?;
    let bias = t.repeat_rows(&g.param(p.bias), conv.rows())?;
    t.relu(&t.add(&conv, &bias)?)
}
