//! Dense f64 tensors with a tape for reverse-mode differentiation.
//!
//! Every operation is a method on [`Tape`]. When at least one operand carries
//! a node on the tape, the result is recorded and gets its own node; when all
//! operands are constants the result is computed eagerly and stays a constant.
//! That lets the same model code run as a plain forward pass (constant
//! parameters, nothing recorded) or as a differentiable one.
//!
//! Shape promotion is explicit: apart from [`Tape::scale`] there is no
//! broadcasting, use [`Tape::repeat_rows`] to lift a vector to a matrix.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Row-major dense array, optionally attached to a tape node.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape { op: "tensor", shapes: vec![shape.to_vec(), vec![values.len()]] });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Rc::new(values), node: None })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: Rc::new(vec![v]), node: None }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], data: Rc::new(values), node: None }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(&[rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![0.0; n]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Copy without the tape node.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

/// Operation kinds the tape understands, with their attributes.
#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    /// Softmax along `axis`. Positions with `keep[j] == false` along that axis
    /// are excluded from normalization and produce exactly zero.
    Softmax { axis: usize, keep: Option<Rc<Vec<bool>>> },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Max { axis: Option<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Select entries along axis 0.
    Gather { indices: Rc<Vec<usize>> },
    /// Rows of an embedding table.
    EmbeddingLookup { ids: Rc<Vec<usize>> },
    /// Valid 1-d convolution of `[N, E]` with a `[k, E, F]` kernel.
    Conv1d,
    Transpose,
    Reshape,
    /// `[d] -> [n, d]`.
    RepeatRows { n: usize },
    /// Row-wise normalization with affine gain and bias.
    LayerNorm { eps: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax { .. } => "softmax",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::Max { .. } => "max",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Gather { .. } => "gather",
            OpKind::EmbeddingLookup { .. } => "embedding_lookup",
            OpKind::Conv1d => "conv1d",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::RepeatRows { .. } => "repeat_rows",
            OpKind::LayerNorm { .. } => "layer_norm",
        }
    }
}

/// One recorded operation.
#[derive(Debug)]
pub struct Node {
    pub kind: OpKind,
    /// Node of each operand, `None` for constants.
    pub inputs: Vec<Option<NodeId>>,
    pub input_values: Vec<Rc<Vec<f64>>>,
    pub input_shapes: Vec<Vec<usize>>,
    pub value: Rc<Vec<f64>>,
    pub shape: Vec<usize>,
    /// Op-specific saved state (argmax positions, normalized activations).
    aux: Vec<f64>,
}

/// Append-only operation record. Confined to one thread.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Result of [`Tape::backward`]: d root / d node for every reachable node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.node.and_then(|id| self.by_node(id))
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient for `t`, zeros when it was not reached.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()])
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.get(t).is_some()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

/// `(outer, len, inner)` strides for iterating lanes along `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![],
        Some(a) => {
            let mut s = shape.to_vec();
            s.remove(a);
            s
        }
    }
}

/// Shapes of a matmul seen as 2-d: `(m, k, n)`.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, Vec<usize>)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Some((a[0], a[1], b[1], vec![a[0], b[1]])),
        (2, 1) if a[1] == b[0] => Some((a[0], a[1], 1, vec![a[0]])),
        (1, 2) if a[0] == b[0] => Some((1, a[0], b[1], vec![b[1]])),
        _ => None,
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, &[shape, &[axis]]));
    }
    Ok(())
}

type Forward = (Vec<usize>, Vec<f64>, Vec<f64>);

fn forward(kind: &OpKind, xs: &[&Tensor]) -> Result<Forward> {
    let name = kind.name();
    let unary = |f: &dyn Fn(f64) -> f64| -> Forward {
        (xs[0].shape.clone(), xs[0].data.iter().map(|&v| f(v)).collect(), vec![])
    };
    let same_shape = || -> Result<()> {
        if xs[0].shape != xs[1].shape {
            return Err(shape_err(name, &[&xs[0].shape, &xs[1].shape]));
        }
        Ok(())
    };
    Ok(match kind {
        OpKind::Leaf => (xs[0].shape.clone(), xs[0].data.to_vec(), vec![]),
        OpKind::MatMul => {
            let (m, k, n, shape) = matmul_dims(&xs[0].shape, &xs[1].shape)
                .ok_or_else(|| shape_err(name, &[&xs[0].shape, &xs[1].shape]))?;
            (shape, matmul_raw(&xs[0].data, &xs[1].data, m, k, n), vec![])
        }
        OpKind::Add => {
            same_shape()?;
            (xs[0].shape.clone(), xs[0].data.iter().zip(xs[1].data.iter()).map(|(a, b)| a + b).collect(), vec![])
        }
        OpKind::Sub => {
            same_shape()?;
            (xs[0].shape.clone(), xs[0].data.iter().zip(xs[1].data.iter()).map(|(a, b)| a - b).collect(), vec![])
        }
        OpKind::Mul => {
            same_shape()?;
            (xs[0].shape.clone(), xs[0].data.iter().zip(xs[1].data.iter()).map(|(a, b)| a * b).collect(), vec![])
        }
        OpKind::Scale(c) => unary(&|v| v * c),
        OpKind::Tanh => unary(&f64::tanh),
        OpKind::Sigmoid => unary(&|v| 1.0 / (1.0 + (-v).exp())),
        OpKind::Relu => unary(&|v| if v > 0.0 { v } else { 0.0 }),
        OpKind::Exp => unary(&f64::exp),
        OpKind::Log => unary(&f64::ln),
        OpKind::Softmax { axis, keep } => {
            let x = xs[0];
            check_axis(name, &x.shape, *axis)?;
            let (outer, len, inner) = lanes(&x.shape, *axis);
            if let Some(k) = keep {
                if k.len() != len {
                    return Err(shape_err(name, &[&x.shape, &[k.len()]]));
                }
                if !k.iter().any(|&b| b) {
                    return Err(Error::InvalidInput("softmax mask removes every position".into()));
                }
            }
            let kept = |j: usize| keep.as_ref().map_or(true, |k| k[j]);
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in (0..len).filter(|&j| kept(j)) {
                        mx = mx.max(x.data[idx(j)]);
                    }
                    let mut total = 0.0;
                    for j in (0..len).filter(|&j| kept(j)) {
                        let e = (x.data[idx(j)] - mx).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                    for j in (0..len).filter(|&j| kept(j)) {
                        out[idx(j)] /= total;
                    }
                }
            }
            (x.shape.clone(), out, vec![])
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let x = xs[0];
            let mean = matches!(kind, OpKind::Mean { .. });
            match axis {
                None => {
                    let s: f64 = x.data.iter().sum();
                    let n = x.len().max(1) as f64;
                    (vec![], vec![if mean { s / n } else { s }], vec![])
                }
                Some(a) => {
                    check_axis(name, &x.shape, *a)?;
                    let (outer, len, inner) = lanes(&x.shape, *a);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                out[o * inner + i] += x.data[(o * len + j) * inner + i];
                            }
                        }
                    }
                    if mean {
                        let n = len.max(1) as f64;
                        out.iter_mut().for_each(|v| *v /= n);
                    }
                    (reduced_shape(&x.shape, *axis), out, vec![])
                }
            }
        }
        OpKind::Max { axis } => {
            let x = xs[0];
            if x.is_empty() {
                return Err(shape_err(name, &[&x.shape]));
            }
            let (outer, len, inner) = match axis {
                None => (1, x.len(), 1),
                Some(a) => {
                    check_axis(name, &x.shape, *a)?;
                    lanes(&x.shape, *a)
                }
            };
            let mut out = vec![0.0; outer * inner];
            let mut arg = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for j in 1..len {
                        // strict comparison keeps the first maximal index on ties
                        if x.data[(o * len + j) * inner + i] > x.data[(o * len + best) * inner + i] {
                            best = j;
                        }
                    }
                    out[o * inner + i] = x.data[(o * len + best) * inner + i];
                    arg[o * inner + i] = best as f64;
                }
            }
            (reduced_shape(&x.shape, *axis), out, arg)
        }
        OpKind::Concat { axis } => {
            let first = &xs[0].shape;
            check_axis(name, first, *axis)?;
            let mut total = 0;
            for x in xs {
                let mut a = x.shape.clone();
                let mut b = first.clone();
                if a.len() != b.len() {
                    return Err(shape_err(name, &xs.iter().map(|t| t.shape.as_slice()).collect::<Vec<_>>()));
                }
                a[*axis] = 0;
                b[*axis] = 0;
                if a != b {
                    return Err(shape_err(name, &xs.iter().map(|t| t.shape.as_slice()).collect::<Vec<_>>()));
                }
                total += x.shape[*axis];
            }
            let mut shape = first.clone();
            shape[*axis] = total;
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for x in xs {
                    let chunk = x.shape[*axis] * inner;
                    out.extend_from_slice(&x.data[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, out, vec![])
        }
        OpKind::Slice { axis, start, end } => {
            let x = xs[0];
            check_axis(name, &x.shape, *axis)?;
            if start >= end || *end > x.shape[*axis] {
                return Err(shape_err(name, &[&x.shape, &[*start, *end]]));
            }
            let (outer, len, inner) = lanes(&x.shape, *axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = x.shape.clone();
            shape[*axis] = end - start;
            (shape, out, vec![])
        }
        OpKind::Gather { indices } | OpKind::EmbeddingLookup { ids: indices } => {
            let x = xs[0];
            if x.shape.is_empty() {
                return Err(shape_err(name, &[&x.shape]));
            }
            if matches!(kind, OpKind::EmbeddingLookup { .. }) && x.shape.len() != 2 {
                return Err(shape_err(name, &[&x.shape]));
            }
            let rows = x.shape[0];
            let inner: usize = x.shape[1..].iter().product();
            let mut out = Vec::with_capacity(indices.len() * inner);
            for &i in indices.iter() {
                if i >= rows {
                    return Err(shape_err(name, &[&x.shape, &[i]]));
                }
                out.extend_from_slice(&x.data[i * inner..(i + 1) * inner]);
            }
            let mut shape = x.shape.clone();
            shape[0] = indices.len();
            (shape, out, vec![])
        }
        OpKind::Conv1d => {
            let (x, w) = (xs[0], xs[1]);
            if x.shape.len() != 2 || w.shape.len() != 3 || w.shape[1] != x.shape[1] || x.shape[0] < w.shape[0] {
                return Err(shape_err(name, &[&x.shape, &w.shape]));
            }
            let (n, e) = (x.shape[0], x.shape[1]);
            let (k, f) = (w.shape[0], w.shape[2]);
            let t_out = n - k + 1;
            let mut out = vec![0.0; t_out * f];
            for t in 0..t_out {
                // the window [t, t+k) of x is contiguous and matches the kernel's [k*E, F] layout
                let window = &x.data[t * e..(t + k) * e];
                let row = &mut out[t * f..(t + 1) * f];
                for (p, &xv) in window.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, wv) in row.iter_mut().zip(&w.data[p * f..(p + 1) * f]) {
                        *o += xv * wv;
                    }
                }
            }
            (vec![t_out, f], out, vec![])
        }
        OpKind::Transpose => {
            let x = xs[0];
            if x.shape.len() != 2 {
                return Err(shape_err(name, &[&x.shape]));
            }
            (vec![x.shape[1], x.shape[0]], transpose_raw(&x.data, x.shape[0], x.shape[1]), vec![])
        }
        OpKind::Reshape => {
            // target shape travels as the second (constant) operand's shape
            let x = xs[0];
            let target = xs[1].shape.clone();
            if target.iter().product::<usize>() != x.len() {
                return Err(shape_err(name, &[&x.shape, &target]));
            }
            (target, x.data.to_vec(), vec![])
        }
        OpKind::RepeatRows { n } => {
            let x = xs[0];
            if x.shape.len() != 1 {
                return Err(shape_err(name, &[&x.shape]));
            }
            let mut out = Vec::with_capacity(n * x.len());
            for _ in 0..*n {
                out.extend_from_slice(&x.data);
            }
            (vec![*n, x.len()], out, vec![])
        }
        OpKind::LayerNorm { eps } => {
            let (x, g, b) = (xs[0], xs[1], xs[2]);
            if x.shape.len() != 2 || g.shape != [x.shape[1]] || b.shape != [x.shape[1]] {
                return Err(shape_err(name, &[&x.shape, &g.shape, &b.shape]));
            }
            let (r, d) = (x.shape[0], x.shape[1]);
            let mut out = vec![0.0; r * d];
            // aux: normalized activations followed by one inverse std per row
            let mut aux = vec![0.0; r * d + r];
            for i in 0..r {
                let row = &x.data[i * d..(i + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                aux[r * d + i] = rstd;
                for j in 0..d {
                    let xh = (row[j] - mu) * rstd;
                    aux[i * d + j] = xh;
                    out[i * d + j] = xh * g.data[j] + b.data[j];
                }
            }
            (x.shape.clone(), out, aux)
        }
    })
}

/// Vector-Jacobian products: gradient for each operand given the output gradient.
fn backward_node(node: &Node, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
    let needs = |i: usize| node.inputs[i].is_some();
    let x = |i: usize| node.input_values[i].as_slice();
    let y = node.value.as_slice();
    let mut out: Vec<Option<Vec<f64>>> = vec![None; node.inputs.len()];
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..gy.len()).map(|i| gy[i] * f(i)).collect() };
    match &node.kind {
        OpKind::Leaf => {}
        OpKind::MatMul => {
            let (m, k, n, _) = matmul_dims(&node.input_shapes[0], &node.input_shapes[1]).expect("checked in forward");
            if needs(0) {
                // dA = dC · Bᵀ
                let bt = transpose_raw(x(1), k, n);
                out[0] = Some(matmul_raw(gy, &bt, m, n, k));
            }
            if needs(1) {
                // dB = Aᵀ · dC
                let at = transpose_raw(x(0), m, k);
                out[1] = Some(matmul_raw(&at, gy, k, m, n));
            }
        }
        OpKind::Add => {
            for i in 0..2 {
                if needs(i) {
                    out[i] = Some(gy.to_vec());
                }
            }
        }
        OpKind::Sub => {
            if needs(0) {
                out[0] = Some(gy.to_vec());
            }
            if needs(1) {
                out[1] = Some(gy.iter().map(|g| -g).collect());
            }
        }
        OpKind::Mul => {
            if needs(0) {
                out[0] = Some(elementwise(&|i| x(1)[i]));
            }
            if needs(1) {
                out[1] = Some(elementwise(&|i| x(0)[i]));
            }
        }
        OpKind::Scale(c) => out[0] = Some(gy.iter().map(|g| g * c).collect()),
        OpKind::Tanh => out[0] = Some(elementwise(&|i| 1.0 - y[i] * y[i])),
        OpKind::Sigmoid => out[0] = Some(elementwise(&|i| y[i] * (1.0 - y[i]))),
        OpKind::Relu => out[0] = Some(elementwise(&|i| if x(0)[i] > 0.0 { 1.0 } else { 0.0 })),
        OpKind::Exp => out[0] = Some(elementwise(&|i| y[i])),
        OpKind::Log => out[0] = Some(elementwise(&|i| 1.0 / x(0)[i])),
        OpKind::Softmax { axis, .. } => {
            // exact Jacobian-vector product: dx = y ⊙ (dy − ⟨y, dy⟩) per lane
            let (outer, len, inner) = lanes(&node.shape, *axis);
            let mut g = vec![0.0; gy.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| y[idx(j)] * gy[idx(j)]).sum();
                    for j in 0..len {
                        g[idx(j)] = y[idx(j)] * (gy[idx(j)] - dot);
                    }
                }
            }
            out[0] = Some(g);
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let shape = &node.input_shapes[0];
            let total: usize = shape.iter().product();
            let mean = matches!(node.kind, OpKind::Mean { .. });
            let g = match axis {
                None => {
                    let s = if mean { gy[0] / total.max(1) as f64 } else { gy[0] };
                    vec![s; total]
                }
                Some(a) => {
                    let (outer, len, inner) = lanes(shape, *a);
                    let div = if mean { len.max(1) as f64 } else { 1.0 };
                    let mut g = vec![0.0; total];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                g[(o * len + j) * inner + i] = gy[o * inner + i] / div;
                            }
                        }
                    }
                    g
                }
            };
            out[0] = Some(g);
        }
        OpKind::Max { axis } => {
            let shape = &node.input_shapes[0];
            let total: usize = shape.iter().product();
            let (outer, len, inner) = match axis {
                None => (1, total, 1),
                Some(a) => lanes(shape, *a),
            };
            let mut g = vec![0.0; total];
            for o in 0..outer {
                for i in 0..inner {
                    let j = node.aux[o * inner + i] as usize;
                    g[(o * len + j) * inner + i] += gy[o * inner + i];
                }
            }
            out[0] = Some(g);
        }
        OpKind::Concat { axis } => {
            let inner: usize = node.shape[*axis + 1..].iter().product();
            let outer: usize = node.shape[..*axis].iter().product();
            let total_chunk = node.shape[*axis] * inner;
            let mut offset = 0;
            for (idx, shape) in node.input_shapes.iter().enumerate() {
                let chunk = shape[*axis] * inner;
                if needs(idx) {
                    let mut g = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        g.extend_from_slice(&gy[o * total_chunk + offset..o * total_chunk + offset + chunk]);
                    }
                    out[idx] = Some(g);
                }
                offset += chunk;
            }
        }
        OpKind::Slice { axis, start, end } => {
            let shape = &node.input_shapes[0];
            let (outer, len, inner) = lanes(shape, *axis);
            let mut g = vec![0.0; outer * len * inner];
            let width = (end - start) * inner;
            for o in 0..outer {
                g[(o * len + start) * inner..(o * len + end) * inner]
                    .copy_from_slice(&gy[o * width..(o + 1) * width]);
            }
            out[0] = Some(g);
        }
        OpKind::Gather { indices } | OpKind::EmbeddingLookup { ids: indices } => {
            let shape = &node.input_shapes[0];
            let inner: usize = shape[1..].iter().product();
            let mut g = vec![0.0; shape.iter().product()];
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..inner {
                    g[i * inner + c] += gy[r * inner + c];
                }
            }
            out[0] = Some(g);
        }
        OpKind::Conv1d => {
            let (xs, ws) = (&node.input_shapes[0], &node.input_shapes[1]);
            let e = xs[1];
            let (k, f) = (ws[0], ws[2]);
            let t_out = node.shape[0];
            if needs(0) {
                let mut g = vec![0.0; xs[0] * e];
                for t in 0..t_out {
                    let gr = &gy[t * f..(t + 1) * f];
                    for p in 0..k * e {
                        let wr = &x(1)[p * f..(p + 1) * f];
                        g[t * e + p] += gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                out[0] = Some(g);
            }
            if needs(1) {
                let mut g = vec![0.0; k * e * f];
                for t in 0..t_out {
                    let gr = &gy[t * f..(t + 1) * f];
                    for p in 0..k * e {
                        let xv = x(0)[t * e + p];
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, gv) in g[p * f..(p + 1) * f].iter_mut().zip(gr) {
                            *o += xv * gv;
                        }
                    }
                }
                out[1] = Some(g);
            }
        }
        OpKind::Transpose => {
            let s = &node.input_shapes[0];
            out[0] = Some(transpose_raw(gy, s[1], s[0]));
        }
        OpKind::Reshape => out[0] = Some(gy.to_vec()),
        OpKind::RepeatRows { n } => {
            let d = node.input_shapes[0][0];
            let mut g = vec![0.0; d];
            for r in 0..*n {
                for c in 0..d {
                    g[c] += gy[r * d + c];
                }
            }
            out[0] = Some(g);
        }
        OpKind::LayerNorm { .. } => {
            let s = &node.input_shapes[0];
            let (r, d) = (s[0], s[1]);
            let gamma = x(1);
            let xhat = &node.aux[..r * d];
            let rstd = &node.aux[r * d..];
            if needs(0) {
                let mut g = vec![0.0; r * d];
                for i in 0..r {
                    let dxh: Vec<f64> = (0..d).map(|j| gy[i * d + j] * gamma[j]).collect();
                    let sum_dxh: f64 = dxh.iter().sum();
                    let sum_dxh_xh: f64 = (0..d).map(|j| dxh[j] * xhat[i * d + j]).sum();
                    for j in 0..d {
                        g[i * d + j] =
                            rstd[i] / d as f64 * (d as f64 * dxh[j] - sum_dxh - xhat[i * d + j] * sum_dxh_xh);
                    }
                }
                out[0] = Some(g);
            }
            if needs(1) {
                let mut g = vec![0.0; d];
                for i in 0..r {
                    for j in 0..d {
                        g[j] += gy[i * d + j] * xhat[i * d + j];
                    }
                }
                out[1] = Some(g);
            }
            if needs(2) {
                let mut g = vec![0.0; d];
                for i in 0..r {
                    for j in 0..d {
                        g[j] += gy[i * d + j];
                    }
                }
                out[2] = Some(g);
            }
        }
    }
    out
}

/// Output-to-input routing of a linear structural op (same map as its VJP).
pub(crate) fn route_linear(node: &Node, r: &[f64]) -> Vec<Option<Vec<f64>>> {
    backward_node(node, r)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow a recorded node.
    pub fn with_node<R>(&self, id: NodeId, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    /// Register `t` as a differentiable input.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            kind: OpKind::Leaf,
            inputs: vec![],
            input_values: vec![],
            input_shapes: vec![],
            value: t.data.clone(),
            shape: t.shape.clone(),
            aux: vec![],
        });
        Tensor { shape: t.shape.clone(), data: t.data.clone(), node: Some(id) }
    }

    /// Apply `kind` to `inputs`, recording a node when any input is on the tape.
    pub fn record(&self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let arity = match kind {
            OpKind::Leaf => 1,
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Conv1d | OpKind::Reshape => 2,
            OpKind::LayerNorm { .. } => 3,
            OpKind::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(shape_err(kind.name(), &inputs.iter().map(|t| t.shape.as_slice()).collect::<Vec<_>>()));
        }
        if matches!(kind, OpKind::Leaf) {
            return Ok(self.leaf(inputs[0]));
        }
        let (shape, values, aux) = forward(&kind, inputs)?;
        let value = Rc::new(values);
        if inputs.iter().all(|t| t.node.is_none()) {
            return Ok(Tensor { shape, data: value, node: None });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            kind,
            inputs: inputs.iter().map(|t| t.node).collect(),
            input_values: inputs.iter().map(|t| t.data.clone()).collect(),
            input_shapes: inputs.iter().map(|t| t.shape.clone()).collect(),
            value: value.clone(),
            shape: shape.clone(),
            aux,
        });
        Ok(Tensor { shape, data: value, node: Some(id) })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.len() != 1 {
            return Err(Error::NotScalar { shape: root.shape.clone() });
        }
        let nodes = self.nodes.borrow();
        let root_id = root.node.ok_or(Error::NotRecorded)?;
        if root_id >= nodes.len() {
            return Err(Error::NotRecorded);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root_id] = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            for (slot, g) in node.inputs.iter().zip(backward_node(node, &gy)) {
                if let (Some(src), Some(g)) = (slot, g) {
                    match &mut grads[*src] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        empty => *empty = Some(g),
                    }
                }
            }
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(OpKind::MatMul, &[a, b])
    }
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.record(OpKind::Scale(c), &[a])
    }
    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Sigmoid, &[a])
    }
    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Relu, &[a])
    }
    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Exp, &[a])
    }
    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Log, &[a])
    }
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.record(OpKind::Softmax { axis, keep: None }, &[a])
    }
    /// Softmax over the kept positions of `axis`; the rest come out as exact zeros.
    pub fn masked_softmax(&self, a: &Tensor, axis: usize, keep: &[bool]) -> Result<Tensor> {
        self.record(OpKind::Softmax { axis, keep: Some(Rc::new(keep.to_vec())) }, &[a])
    }
    pub fn sum(&self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.record(OpKind::Sum { axis }, &[a])
    }
    pub fn mean(&self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.record(OpKind::Mean { axis }, &[a])
    }
    pub fn max(&self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.record(OpKind::Max { axis }, &[a])
    }
    /// Max over the sequence axis of a `[T, F]` feature map.
    pub fn max_over_time(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(shape_err("max_over_time", &[&a.shape]));
        }
        self.max(a, Some(0))
    }
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat", &[]));
        }
        self.record(OpKind::Concat { axis }, parts)
    }
    pub fn slice(&self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        self.record(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn gather(&self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        self.record(OpKind::Gather { indices: Rc::new(indices.to_vec()) }, &[a])
    }
    /// Single entry of a vector as a scalar.
    pub fn pick(&self, a: &Tensor, index: usize) -> Result<Tensor> {
        if a.rank() != 1 {
            return Err(shape_err("pick", &[&a.shape]));
        }
        let g = self.gather(a, &[index])?;
        self.reshape(&g, &[])
    }
    pub fn embedding_lookup(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.record(OpKind::EmbeddingLookup { ids: Rc::new(ids.to_vec()) }, &[table])
    }
    pub fn conv1d(&self, x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Conv1d, &[x, kernel])
    }
    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        self.record(OpKind::Transpose, &[a])
    }
    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let target = Tensor { shape: shape.to_vec(), data: Rc::new(vec![]), node: None };
        self.record(OpKind::Reshape, &[a, &target])
    }
    pub fn repeat_rows(&self, a: &Tensor, n: usize) -> Result<Tensor> {
        self.record(OpKind::RepeatRows { n }, &[a])
    }
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        self.record(OpKind::LayerNorm { eps }, &[x, gain, bias])
    }
}

/// Central-difference gradient of a scalar function. Test oracle only.
pub fn finite_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite difference step must be positive");
    let base = x.values().to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += step;
            let mut minus = base.clone();
            minus[i] -= step;
            let fp = f(&Tensor::new(x.shape(), plus).expect("same shape"));
            let fm = f(&Tensor::new(x.shape(), minus).expect("same shape"));
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let y = tape.softmax(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(y.values(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_by_hand() {
        // [[1,0,2],[0,1,-1]] · [1,2,3] = [7, -1]
        let tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap();
        let y = tape.matmul(&a, &Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert_eq!(y.values(), &[7.0, -1.0]);
    }

    #[test]
    fn tanh_at_origin() {
        let tape = Tape::new();
        assert_eq!(tape.tanh(&Tensor::scalar(0.0)).unwrap().item(), 0.0);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::new();
        let err = tape.add(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
        assert!(tape.matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let root = tape.sum(&sq, None).unwrap();
        let g = tape.backward(&root).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn constant_path_gives_zero_gradient_and_unreached_nodes_are_absent() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(&Tensor::vector(vec![3.0]));
        let z = tape.scale(&x, 0.0).unwrap();
        let root = tape.sum(&z, None).unwrap();
        let g = tape.backward(&root).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0, 0.0]);
        assert!(!g.contains(&unused));
    }

    #[test]
    fn softmax_pick_matches_finite_differences() {
        let x0 = Tensor::vector(vec![0.3, -1.2, 0.8, 0.1]);
        let f = |x: &Tensor| {
            let tape = Tape::new();
            let s = tape.softmax(x, 0).unwrap();
            tape.pick(&s, 2).unwrap().item()
        };
        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let s = tape.softmax(&x, 0).unwrap();
        let root = tape.pick(&s, 2).unwrap();
        let g = tape.backward(&root).unwrap();
        let fd = finite_difference(f, &x0, 1e-5);
        assert!(relative_error(g.get(&x).unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn finite_difference_of_sum_and_quadratic() {
        let x = Tensor::vector(vec![0.5, -2.0, 3.0]);
        let fd = finite_difference(|t| t.values().iter().sum(), &x, 1e-5);
        for v in fd {
            assert!((v - 1.0).abs() < 1e-8);
        }
        let q = finite_difference(|t| t.values().iter().map(|v| v * v).sum(), &Tensor::vector(vec![1.0, 2.0]), 1e-5);
        assert!((q[0] - 2.0).abs() < 1e-6 && (q[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 3.0, 3.0]));
        let m = tape.max(&x, None).unwrap();
        let g = tape.backward(&m).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_zeroes_removed_positions() {
        let tape = Tape::new();
        let y = tape.masked_softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]), 0, &[true, false, true]).unwrap();
        assert_eq!(y.values()[1], 0.0);
        assert!((y.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(tape.masked_softmax(&Tensor::vector(vec![1.0]), 0, &[false]).is_err());
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let y = tape.add(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![2.0])).unwrap();
        assert!(y.node().is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn conv1d_shorter_than_kernel_rejected() {
        let tape = Tape::new();
        assert!(tape.conv1d(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 3, 4])).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::new();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(&c, 1, 2, 3).unwrap();
        assert_eq!(s.values(), &[5.0, 6.0]);
    }
}
