//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it needs
//! for the backward pass. `backward` walks the nodes in exact reverse order of
//! recording and accumulates gradients additively, so a value consumed by several
//! operations receives the sum of their contributions.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    /// Pointwise maximum. The gradient goes to the larger operand, ties to the first.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Subgradient at zero is zero.
    Relu,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    p: usize,
    q: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        dims: MatMulDims,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    ScaleBy {
        x: Var,
        factors: Vec<f64>,
    },
    Activation {
        kind: Activation,
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        classes: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
        cols: usize,
    },
    Narrow {
        x: Var,
        start: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a trainable input.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient computed by the last [`Tape::backward`], if `v` took part in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad || value.requires_grad();
        self.nodes.push(Node {
            value: value.with_requires_grad(needs_grad),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ── forward operations ──────────────────────────────────────────

    /// Matrix product over the last two dimensions.
    ///
    /// Leading batch dimensions must be equal, or one operand may be a plain matrix
    /// that is shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Shape(format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (p2, q) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if p != p2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch_shape = match (ba.is_empty(), bb.is_empty()) {
            (_, true) => ba.to_vec(),
            (true, false) => bb.to_vec(),
            (false, false) if ba == bb => ba.to_vec(),
            _ => return Err(mismatch()),
        };
        let batch: usize = batch_shape.iter().product();
        let dims = MatMulDims {
            batch,
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            m,
            p,
            q,
        };
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * q];
        for bi in 0..batch {
            let ao = if dims.a_batched { bi * m * p } else { 0 };
            let bo = if dims.b_batched { bi * p * q } else { 0 };
            matmul_acc(
                &da[ao..ao + m * p],
                &db[bo..bo + p * q],
                &mut out[bi * m * q..(bi + 1) * m * q],
                m,
                p,
                q,
            );
        }
        let mut shape = batch_shape;
        shape.extend([m, q]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, dims }, needs))
    }

    /// Pointwise binary operation. `b` may be a vector matching the last
    /// dimension of `a`, in which case it is broadcast over every row.
    pub fn elementwise(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = if sa == sb {
            false
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            true
        } else {
            return Err(Error::Shape(format!(
                "cannot combine {sa:?} with {sb:?} pointwise"
            )));
        };
        let (da, db) = (self.data(a), self.data(b));
        let cols = db.len();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        let out: Vec<f64> = if broadcast {
            da.iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[i % cols]))
                .collect()
        } else {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(sa, out)?,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Mul, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Max, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x);
        let out = value.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, factor }, needs)
    }

    /// Multiplies by fixed per-element factors (used for dropout masks).
    pub fn scale_by(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let value = self.value(x);
        if factors.len() != value.numel() {
            return Err(Error::Shape(format!(
                "{} factors for tensor of shape {:?}",
                factors.len(),
                value.shape()
            )));
        }
        let out = value.data().iter().zip(&factors).map(|(v, f)| v * f).collect();
        let t = Tensor::new(value.shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::ScaleBy { x, factors }, needs))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let value = self.value(x);
        let out = value
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::Tanh => v.tanh(),
                Activation::Gelu => 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            })
            .collect();
        let t = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Activation { kind, x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(Activation::Gelu, x)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax along the last axis where positions with `keep[j] == false` are
    /// treated as negative infinity and receive exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let axis = self.shape(x).len().checked_sub(1).ok_or_else(|| {
            Error::Shape("masked softmax needs at least one dimension".into())
        })?;
        self.softmax_impl(x, axis, Some(keep))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if let Some(keep) = keep {
            if keep.len() != len {
                return Err(Error::Shape(format!(
                    "mask of length {} for softmax over {len} positions",
                    keep.len()
                )));
            }
            if !keep.iter().any(|&k| k) {
                return Err(Error::Contract("softmax mask hides every position".into()));
            }
        }
        let kept = |l: usize| keep.is_none_or(|k| k[l]);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len)
                    .filter(|&l| kept(l))
                    .map(|l| src[at(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in (0..len).filter(|&l| kept(l)) {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in (0..len).filter(|&l| kept(l)) {
                    out[at(l)] /= total;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Normalizes each row over the last dimension, then scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer norm of a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer norm over {shape:?} with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Cross-entropy of a single logit vector against a class index; returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        if self.shape(logits).len() != 1 {
            return Err(Error::Shape(format!(
                "expected a logit vector, got {:?}",
                self.shape(logits)
            )));
        }
        self.cross_entropy_impl(logits, vec![target], Vec::new())
    }

    /// Row-wise cross-entropy of `[rows, classes]` logits; returns per-row losses `[rows]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Shape(format!(
                "logits {shape:?} against {} targets",
                targets.len()
            )));
        }
        self.cross_entropy_impl(logits, targets.to_vec(), vec![targets.len()])
    }

    fn cross_entropy_impl(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let classes = *self.shape(logits).last().expect("checked rank");
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index(format!("target class {t} of {classes}")));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut losses = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
            losses.push(log_z - row[t]);
        }
        let needs = self.needs(logits);
        let value = if out_shape.is_empty() {
            Tensor::scalar(losses[0])
        } else {
            Tensor::new(out_shape, losses)?
        };
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                classes,
                probs,
            },
            needs,
        ))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows needs a matrix, got {shape:?}")));
        }
        if indices.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        let (n, cols) = (shape[0], shape[1]);
        if let Some(&i) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {i} of {n}")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], out)?,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
                cols,
            },
            needs,
        ))
    }

    /// Slice `[start, start + len)` of the last dimension.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape("narrow of a scalar".into()))?;
        if len == 0 || start + len > cols {
            return Err(Error::Index(format!("columns {start}..{} of {cols}", start + len)));
        }
        let src = self.data(x);
        let out: Vec<f64> = src
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = len;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { x, start, cols }, needs))
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!("cannot concat {s:?} after {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x);
        let t = Tensor::new(shape, value.data().to_vec()).map_err(|_| {
            Error::Shape(format!("cannot reshape {:?}", value.shape()))
        })?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("transpose of {shape:?}")));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = shape[..shape.len() - 2].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            let o = bi * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[o + c * rows + r] = src[o + r * cols + c];
                }
            }
        }
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape.swap(n - 2, n - 1);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean), Op::Mean { x }, needs)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss`, storing gradients on every node that
    /// depends on a tensor requiring them. Leaves requiring gradients that `loss`
    /// does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(end, || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..end).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            self.nodes[id].value.set_grad(g);
        }
        for node in &mut self.nodes[..end] {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(vec![0.0; n]);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => {
                let MatMulDims {
                    batch,
                    a_batched,
                    b_batched,
                    m,
                    p,
                    q,
                } = *dims;
                let (da, db) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut ga = vec![0.0; da.len()];
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * p } else { 0 };
                        let bo = if b_batched { bi * p * q } else { 0 };
                        let gc = &g[bi * m * q..(bi + 1) * m * q];
                        let bm = &db[bo..bo + p * q];
                        for i in 0..m {
                            let grow = &gc[i * q..(i + 1) * q];
                            for k in 0..p {
                                let brow = &bm[k * q..(k + 1) * q];
                                ga[ao + i * p + k] += dot(grow, brow);
                            }
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * p } else { 0 };
                        let bo = if b_batched { bi * p * q } else { 0 };
                        let gc = &g[bi * m * q..(bi + 1) * m * q];
                        for i in 0..m {
                            let grow = &gc[i * q..(i + 1) * q];
                            for k in 0..p {
                                let av = da[ao + i * p + k];
                                if av == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[bo + k * q..bo + (k + 1) * q];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let cols = db.len();
                let bv = |i: usize| if *broadcast { db[i % cols] } else { db[i] };
                if self.needs(*a) {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(i, gv)| gv * bv(i)).collect(),
                        BinaryKind::Max => g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| if da[i] >= bv(i) { gv } else { 0.0 })
                            .collect(),
                    };
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for (i, &gv) in g.iter().enumerate() {
                        let j = if *broadcast { i % cols } else { i };
                        gb[j] += match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * da[i],
                            BinaryKind::Max => {
                                if da[i] >= bv(i) {
                                    0.0
                                } else {
                                    gv
                                }
                            }
                        };
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::ScaleBy { x, factors } => {
                accumulate(grads, *x, g.iter().zip(factors).map(|(v, f)| v * f).collect());
            }
            Op::Activation { kind, x } => {
                let src = self.data(*x);
                let out = node.value.data();
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let v = src[i];
                        let d = match kind {
                            Activation::Relu => {
                                if v > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Tanh => 1.0 - out[i] * out[i],
                            Activation::Gelu => {
                                let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                                0.5 * (1.0 + t)
                                    + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                            }
                        };
                        gv * d
                    })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let s: f64 = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..*len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - s);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                inv_std,
            } => {
                let d = *d;
                let rows = xhat.len() / d;
                let gam = self.data(*gamma);
                if self.needs(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let gh: Vec<f64> = g[span.clone()]
                            .iter()
                            .zip(gam)
                            .map(|(gv, gm)| gv * gm)
                            .collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = gh.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for c in 0..d {
                            gx[r * d + c] =
                                scale * (d as f64 * gh[c] - sum_gh - xhat[r * d + c] * sum_ghx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += gv * h;
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; d];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                    accumulate(grads, *beta, gb);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                classes,
                probs,
            } => {
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * classes + t] -= 1.0;
                    for v in &mut gx[r * classes..(r + 1) * classes] {
                        *v *= g[r];
                    }
                }
                accumulate(grads, *logits, gx);
            }
            Op::GatherRows { x, indices, cols } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (k, &i) in indices.iter().enumerate() {
                    let dst = &mut gx[i * cols..(i + 1) * cols];
                    for (d, &gv) in dst.iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                        *d += gv;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Narrow { x, start, cols } => {
                let len = *node.value.shape().last().expect("non-scalar");
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (r, grow) in g.chunks(len).enumerate() {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(grow);
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                // g has the transposed layout [cols, rows].
                let mut gx = vec![0.0; g.len()];
                for bi in 0..*batch {
                    let o = bi * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gx[o + r * cols + c] = g[o + c * rows + r];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a[m,p] @ b[p,q]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let orow = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let av = a[i * p + k];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[k * q..(k + 1) * q]) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(eye, col).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
        assert_eq!(tape.shape(y), &[1, 1]);
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("by [2, 3]"), "{err}");
    }

    #[test]
    fn batched_matmul_shares_plain_matrix() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
        let bad = tape.constant(t(&[3, 2, 1], &[0.0; 6]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let z = tape.constant(t(&[3], &[0.0; 3]));
        let y = tape.mul(a, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let a = tape.constant(t(&[2], &[1.0, 5.0]));
        let b = tape.constant(t(&[2], &[3.0, 2.0]));
        let y = tape.maximum(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

        let a = tape.constant(t(&[2], &[5.0, 5.0]));
        let b = tape.constant(t(&[2], &[2.0, 3.0]));
        let y = tape.sub(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
    }

    #[test]
    fn pointwise_rejects_unbroadcastable() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2], &[0.0; 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn max_tie_sends_gradient_to_first_operand() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 1.0]));
        let b = tape.param(t(&[2], &[1.0, 0.0]));
        let y = tape.maximum(a, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn masked_softmax_gives_zero_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 9.0, 2.0, 0.5, 50.0, 0.5]));
        let y = tape.masked_softmax(x, &[true, false, true]).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(&[0, 1]), 0.0);
        assert_eq!(v.at(&[1, 1]), 0.0);
        assert!((v.at(&[1, 0]) - 0.5).abs() < 1e-15);
        assert!(tape.masked_softmax(x, &[false; 3]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.param(t(&[2], &[0.0, 0.0]));
        let l = tape.cross_entropy(z, 0).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);

        let z2 = tape.constant(t(&[2], &[1000.0, 0.0]));
        let l2 = tape.cross_entropy(z2, 0).unwrap();
        assert!(tape.value(l2).data()[0].abs() < 1e-12);

        let l = tape.cross_entropy(z, 1).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(z).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);

        assert!(matches!(tape.cross_entropy(z, 2), Err(Error::Index(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let one = tape.constant(t(&[3], &[1.0; 3]));
        let zero = tape.constant(t(&[3], &[0.0; 3]));
        let x = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, one, zero, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let one = tape.constant(t(&[2], &[1.0; 2]));
        let zero = tape.constant(t(&[2], &[0.0; 2]));
        let c = tape.constant(t(&[2], &[0.7; 2]));
        let x = tape.constant(t(&[1, 2], &[-1.0, 1.0]));
        let y0 = tape.layer_norm(x, one, zero, 1e-12).unwrap();
        let v = tape.value(y0).data().to_vec();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
        let yc = tape.layer_norm(x, one, c, 1e-12).unwrap();
        for (a, b) in tape.value(yc).data().iter().zip(&v) {
            assert!((a - (b + 0.7)).abs() < 1e-15);
        }
        assert!(tape.layer_norm(x, one, zero, 0.0).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let a = tape.tanh(z);
        let b = tape.gelu(z);
        assert_eq!(tape.value(a).data(), &[0.0]);
        assert_eq!(tape.value(b).data(), &[0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        let y = tape.relu(x);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[0.3, -1.0, 2.0, 4.0]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let l = tape.add(s1, s2).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_param_gets_zero_grad_and_constants_none() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[1], &[5.0]));
        let c = tape.constant(t(&[2], &[1.0, 1.0]));
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn gather_narrow_concat_transpose() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(matches!(tape.gather_rows(x, &[3]), Err(Error::Index(_))));

        let left = tape.narrow_last(x, 0, 1).unwrap();
        let right = tape.narrow_last(x, 1, 1).unwrap();
        let back = tape.concat_last(&[right, left]).unwrap();
        assert_eq!(tape.value(back).data(), &[2.0, 1.0, 4.0, 3.0, 6.0, 5.0]);

        let tr = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(tr), &[2, 3]);
        assert_eq!(tape.value(tr).data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);

        let l = tape.sum(g);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
