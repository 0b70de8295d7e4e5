//! ε-rule relevance propagation over a recorded tape.
//!
//! Relevance starts at the predicted logit and is redistributed backwards
//! node by node. Only nodes that depend on the relevance sources (the input
//! embeddings) carry relevance; parameters and constants absorb their share.
//!
//! Rules per operation:
//! - matmul / conv1d with one input-dependent operand: ε-rule on the products.
//! - matmul with two input-dependent operands (attention mixing `α·V`): the
//!   left operand is treated as fixed coefficients. Relevance continues into
//!   the right operand and the left operand's share is kept as a readout,
//!   which for an attention matrix is its per-head `R^α`.
//! - add / sub / sum / mean: proportional to each term's contribution.
//! - elementwise nonlinearities, scaling and layer normalization: passed through.
//! - softmax: blocks relevance (attention weights are fixed coefficients).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Node, OpKind, Tape, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Relevance of every reached node plus attention readouts.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    relevance: Vec<Option<Vec<f64>>>,
    readouts: HashMap<NodeId, Vec<f64>>,
    /// Relevance injected at the root.
    pub total: f64,
}

impl RelevanceMap {
    pub fn of(&self, t: &Tensor) -> Option<&[f64]> {
        t.node().and_then(|id| self.relevance.get(id)).and_then(|r| r.as_deref())
    }

    /// Readout for a coefficient operand of an attention mixing product.
    pub fn readout(&self, t: &Tensor) -> Option<&[f64]> {
        t.node().and_then(|id| self.readouts.get(&id)).map(Vec::as_slice)
    }

    /// Relevance of `t` summed over its last axis (per row).
    pub fn per_row(&self, t: &Tensor) -> Option<Vec<f64>> {
        let r = self.of(t)?;
        let c = t.cols().max(1);
        Some(r.chunks(c).map(|ch| ch.iter().sum()).collect())
    }
}

fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, r: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&r).for_each(|(a, b)| *a += b),
        empty => *empty = Some(r),
    }
}

/// `(m, k, n)` of a recorded matmul.
fn mm_dims(node: &Node) -> (usize, usize, usize) {
    let (a, b) = (&node.input_shapes[0], &node.input_shapes[1]);
    match (a.len(), b.len()) {
        (2, 2) => (a[0], a[1], b[1]),
        (2, 1) => (a[0], a[1], 1),
        _ => (1, a[0], b[1]),
    }
}

/// Per-operand relevance for one node given its output relevance.
/// Returns `(per-input relevance, optional readout for input 0)`.
fn redistribute(node: &Node, active: &[bool], r: &[f64], eps: f64) -> (Vec<Option<Vec<f64>>>, Option<Vec<f64>>) {
    let n_in = node.inputs.len();
    let mut out: Vec<Option<Vec<f64>>> = vec![None; n_in];
    let z = node.value.as_slice();
    let x = |i: usize| node.input_values[i].as_slice();
    let mut readout = None;
    match &node.kind {
        OpKind::Leaf | OpKind::Softmax { .. } => {}
        OpKind::MatMul => {
            let (m, k, n) = mm_dims(node);
            let (a, b) = (x(0), x(1));
            let share: Vec<f64> = (0..m * n).map(|i| r[i] / stabilize(z[i], eps)).collect();
            let left = || {
                let mut ra = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let s: f64 = (0..n).map(|j| b[p * n + j] * share[i * n + j]).sum();
                        ra[i * k + p] = a[i * k + p] * s;
                    }
                }
                ra
            };
            let right = || {
                let mut rb = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let s: f64 = (0..m).map(|i| a[i * k + p] * share[i * n + j]).sum();
                        rb[p * n + j] = b[p * n + j] * s;
                    }
                }
                rb
            };
            match (active[0], active[1]) {
                (true, false) => out[0] = Some(left()),
                (false, true) => out[1] = Some(right()),
                (true, true) => {
                    readout = Some(left());
                    out[1] = Some(right());
                }
                (false, false) => {}
            }
        }
        OpKind::Conv1d => {
            if active[0] {
                let (xs, ws) = (&node.input_shapes[0], &node.input_shapes[1]);
                let e = xs[1];
                let (k, f) = (ws[0], ws[2]);
                let (xv, wv) = (x(0), x(1));
                let mut rx = vec![0.0; xs[0] * e];
                for t in 0..node.shape[0] {
                    for p in 0..k * e {
                        let s: f64 = (0..f).map(|j| wv[p * f + j] * r[t * f + j] / stabilize(z[t * f + j], eps)).sum();
                        rx[t * e + p] += xv[t * e + p] * s;
                    }
                }
                out[0] = Some(rx);
            }
        }
        OpKind::Add | OpKind::Sub => {
            let sign = if matches!(node.kind, OpKind::Sub) { -1.0 } else { 1.0 };
            for (i, s) in [(0usize, 1.0), (1usize, sign)] {
                if active[i] {
                    out[i] = Some((0..z.len()).map(|j| s * x(i)[j] / stabilize(z[j], eps) * r[j]).collect());
                }
            }
        }
        OpKind::Mul => match (active[0], active[1]) {
            (true, false) => out[0] = Some(r.to_vec()),
            (false, true) => out[1] = Some(r.to_vec()),
            (true, true) => {
                let half: Vec<f64> = r.iter().map(|v| v * 0.5).collect();
                out[0] = Some(half.clone());
                out[1] = Some(half);
            }
            _ => {}
        },
        OpKind::Scale(_)
        | OpKind::Tanh
        | OpKind::Sigmoid
        | OpKind::Relu
        | OpKind::Exp
        | OpKind::Log
        | OpKind::Reshape
        | OpKind::LayerNorm { .. } => {
            if active[0] {
                out[0] = Some(r.to_vec());
            }
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let shape = &node.input_shapes[0];
            let xv = x(0);
            let (outer, len, inner) = match axis {
                None => (1, xv.len(), 1),
                Some(a) => (shape[..*a].iter().product(), shape[*a], shape[a + 1..].iter().product()),
            };
            // the mean's contribution ratio x/(len·mean) equals x/sum
            let mut rx = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let total: f64 = (0..len).map(|j| xv[(o * len + j) * inner + i]).sum();
                    let share = r[o * inner + i] / stabilize(total, eps);
                    for j in 0..len {
                        rx[(o * len + j) * inner + i] = xv[(o * len + j) * inner + i] * share;
                    }
                }
            }
            out[0] = Some(rx);
        }
        OpKind::Max { .. }
        | OpKind::Concat { .. }
        | OpKind::Slice { .. }
        | OpKind::Gather { .. }
        | OpKind::EmbeddingLookup { .. }
        | OpKind::Transpose
        | OpKind::RepeatRows { .. } => {
            // pure routing: relevance follows the same path a gradient would
            let routed = crate::tensor::route_linear(node, r);
            for (i, g) in routed.into_iter().enumerate() {
                if active[i] {
                    out[i] = g;
                }
            }
        }
    }
    (out, readout)
}

/// Propagate `seed` (relevance of `root`) back to every node depending on `sources`.
pub fn propagate(tape: &Tape, root: &Tensor, seed: &[f64], sources: &[&Tensor], eps: f64) -> Result<RelevanceMap> {
    let root_id = root.node().ok_or_else(|| Error::MissingCache("relevance root".into()))?;
    if seed.len() != root.len() {
        return Err(Error::Shape { op: "relevance", shapes: vec![root.shape().to_vec(), vec![seed.len()]] });
    }
    let n_nodes = tape.len();
    let mut active = vec![false; n_nodes];
    for s in sources {
        let id = s.node().ok_or_else(|| Error::MissingCache("relevance source".into()))?;
        active[id] = true;
    }
    for id in 0..n_nodes {
        if !active[id] {
            active[id] = tape.with_node(id, |n| n.inputs.iter().any(|i| i.is_some_and(|i| active[i])));
        }
    }
    let mut relevance: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
    let mut readouts = HashMap::new();
    relevance[root_id] = Some(seed.to_vec());
    for id in (0..=root_id).rev() {
        let Some(r) = relevance[id].take() else { continue };
        tape.with_node(id, |node| {
            let flags: Vec<bool> = node.inputs.iter().map(|i| i.is_some_and(|i| active[i])).collect();
            let (parts, readout) = redistribute(node, &flags, &r, eps);
            if let (Some(ro), Some(Some(src))) = (readout, node.inputs.first()) {
                readouts.insert(*src, ro);
            }
            for (slot, part) in node.inputs.iter().zip(parts) {
                if let (Some(src), Some(part)) = (slot, part) {
                    accumulate(&mut relevance[*src], part);
                }
            }
        });
        relevance[id] = Some(r);
    }
    Ok(RelevanceMap { relevance, readouts, total: seed.iter().sum() })
}
