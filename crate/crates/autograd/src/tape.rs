//! Computation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and whatever the
//! backward rule needs. Parents always precede their children, so the
//! backward pass is a single sweep over the nodes in reverse order.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::real::Real;
use crate::tensor::{axis_extents, Tensor};

/// Clamp applied to log arguments in [`Tape::weighted_bce`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Scale,
    Relu,
    Sigmoid,
    Dropout,
    Softmax,
    LayerNorm,
    Concat,
    Slice,
    Sum,
    Mean,
    WeightedBce,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Dropout => "dropout",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::WeightedBce => "weighted_bce",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 15] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Add,
    OpKind::Scale,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Dropout,
    OpKind::Softmax,
    OpKind::LayerNorm,
    OpKind::Concat,
    OpKind::Slice,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::WeightedBce,
];

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
        // output index -> input index, present only when the input was broadcast
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    WeightedBce {
        prob: Var,
        labels: Vec<T>,
        pos_weight: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::WeightedBce { .. } => OpKind::WeightedBce,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations of one forward pass so gradients can be pulled back.
///
/// A tape is owned by a single thread; build a fresh tape per pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    corrupted: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            corrupted: None,
        }
    }

    /// A tape whose backward rule for `kind` is deliberately wrong (gradients
    /// scaled by 1.5). Used to prove that gradient checks catch broken rules.
    pub fn with_corrupted_backward(kind: OpKind) -> Self {
        Tape {
            nodes: Vec::new(),
            corrupted: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul { a, b } | Op::Add { a, b, .. } => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Dropout { x, .. }
            | Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => self.requires_grad(*x),
            Op::LayerNorm { x, gain, bias, .. } => {
                self.requires_grad(*x) || self.requires_grad(*gain) || self.requires_grad(*bias)
            }
            Op::Concat { parts, .. } => parts.iter().any(|p| self.requires_grad(*p)),
            Op::WeightedBce { prob, .. } => self.requires_grad(*prob),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ------------------------------------------------------------------
    // operations
    // ------------------------------------------------------------------

    /// Matrix product of an `m×k` and a `k×n` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av
            .dims2()
            .map_err(|_| TensorError::shape("matmul", format!("lhs {:?} is not a matrix", av.shape())))?;
        let (k2, n) = bv
            .dims2()
            .map_err(|_| TensorError::shape("matmul", format!("rhs {:?} is not a matrix", bv.shape())))?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul { a, b }, value)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let src = xv.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push(Op::Transpose { x }, value)
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
            let value = Tensor::new(av.shape().to_vec(), data)?;
            return self.push(
                Op::Add {
                    a,
                    b,
                    a_map: None,
                    b_map: None,
                },
                value,
            );
        }
        let out_shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            TensorError::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape()))
        })?;
        let a_map = (av.shape() != out_shape.as_slice()).then(|| broadcast_map(av.shape(), &out_shape));
        let b_map = (bv.shape() != out_shape.as_slice()).then(|| broadcast_map(bv.shape(), &out_shape));
        let numel: usize = out_shape.iter().product();
        let data = (0..numel)
            .map(|i| {
                let ia = a_map.as_ref().map_or(i, |m| m[i]);
                let ib = b_map.as_ref().map_or(i, |m| m[i]);
                av.data()[ia] + bv.data()[ib]
            })
            .collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(Op::Add { a, b, a_map, b_map }, value)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu { x }, value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid { x }, value)
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Param {
                op: "dropout",
                detail: format!("p must lie in [0, 1), got {p}"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Dropout { x, mask }, value)
    }

    /// Softmax along `axis`, computed with the slice maximum subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::shape(
                "softmax",
                format!("axis {axis} out of range for {:?}", xv.shape()),
            ));
        }
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(Op::Softmax { x, axis }, value)
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// (population) variance, then applies `gain` and `bias`, both holding
    /// one entry per feature.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Param {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != width || bv.numel() != width {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "input {:?} with gain {:?} and bias {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = xv.numel() / width;
        let n = T::of(width as f64);
        let eps = T::of(eps);
        let mut normalized = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..width {
                let z = (row[c] - mean) * inv;
                normalized[r * width + c] = z;
                out[r * width + c] = z * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            value,
        )
    }

    /// Joins tensors along `axis`; every other dimension must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    format!("{base:?} and {s:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
        )
    }

    /// Selects the index range `range` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || range.start >= range.end || range.end > xv.shape()[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("range {range:?} on axis {axis} of {:?}", xv.shape()),
            ));
        }
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let width = range.end - range.start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = o * len * inner + range.start * inner;
            out.extend_from_slice(&xv.data()[from..from + width * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = width;
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
            value,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let total = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        self.push(Op::Mean { x }, Tensor::scalar(total))
    }

    /// Class-weighted binary cross-entropy averaged over the batch:
    /// `-(w·y·ln p + (1-y)·ln(1-p))`, with log arguments clamped at
    /// [`LOG_CLAMP`].
    pub fn weighted_bce(&mut self, prob: Var, labels: &[T], pos_weight: T) -> Result<Var> {
        let pv = self.value(prob);
        if pv.numel() != labels.len() {
            return Err(TensorError::shape(
                "weighted_bce",
                format!("{} probabilities for {} labels", pv.numel(), labels.len()),
            ));
        }
        if pv.data().iter().any(|p| !(*p >= T::zero() && *p <= T::one())) {
            return Err(TensorError::NonFinite { op: "weighted_bce" });
        }
        let clamp = T::of(LOG_CLAMP);
        let mut total = T::zero();
        for (&p, &y) in pv.data().iter().zip(labels) {
            total -= pos_weight * y * p.max(clamp).ln() + (T::one() - y) * (T::one() - p).max(clamp).ln();
        }
        let loss = total / T::of(labels.len() as f64);
        self.push(
            Op::WeightedBce {
                prob,
                labels: labels.to_vec(),
                pos_weight,
            },
            Tensor::scalar(loss),
        )
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Gradients from previous calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let mut contributions = self.local_grads(i, &grad);
            if self.corrupted == Some(self.nodes[i].op.kind()) {
                let wrong = T::of(1.5);
                for (_, g) in &mut contributions {
                    g.iter_mut().for_each(|v| *v *= wrong);
                }
            }
            self.nodes[i].grad = Some(grad);
            for (parent, g) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its parents.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().unwrap();
                let n = bv.shape()[1];
                let mut res = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(g, bv.data(), &mut ga, m, n, k);
                    res.push((*a, ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g, &mut gb, m, k, n);
                    res.push((*b, gb));
                }
                res
            }
            Op::Transpose { x } => {
                let (r, c) = out.dims2().unwrap();
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Add { a, b, a_map, b_map } => {
                let reduce = |v: Var, map: &Option<Vec<usize>>| match map {
                    None => g.to_vec(),
                    Some(map) => {
                        let mut acc = vec![T::zero(); self.value(v).numel()];
                        for (o, &src) in map.iter().enumerate() {
                            acc[src] += g[o];
                        }
                        acc
                    }
                };
                vec![(*a, reduce(*a, a_map)), (*b, reduce(*b, b_map))]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|&v| v * *factor).collect())],
            Op::Relu { x } => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid { x } => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())],
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let width = *out.shape().last().unwrap();
                let rows = out.numel() / width;
                let gain_v = self.value(*gain).data();
                let n = T::of(width as f64);
                let mut gx = vec![T::zero(); out.numel()];
                let mut g_gain = vec![T::zero(); width];
                let mut g_bias = vec![T::zero(); width];
                for r in 0..rows {
                    let span = r * width..(r + 1) * width;
                    let (gr, zr) = (&g[span.clone()], &normalized[span.clone()]);
                    let mut sum_dz = T::zero();
                    let mut sum_dz_z = T::zero();
                    for c in 0..width {
                        let dz = gr[c] * gain_v[c];
                        sum_dz += dz;
                        sum_dz_z += dz * zr[c];
                        g_gain[c] += gr[c] * zr[c];
                        g_bias[c] += gr[c];
                    }
                    for c in 0..width {
                        let dz = gr[c] * gain_v[c];
                        gx[r * width + c] = inv_std[r] * (dz - (sum_dz + zr[c] * sum_dz_z) / n);
                    }
                }
                vec![(*x, gx), (*gain, g_gain), (*bias, g_bias)]
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_extents(out.shape(), *axis);
                let mut grads: Vec<Vec<T>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.value(*p).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (k, p) in parts.iter().enumerate() {
                        let chunk = self.value(*p).shape()[*axis] * inner;
                        grads[k].extend_from_slice(&g[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                parts.iter().copied().zip(grads).collect()
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_extents(xv.shape(), *axis);
                let width = out.shape()[*axis];
                let mut gx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    let from = o * len * inner + start * inner;
                    gx[from..from + width * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / T::of(n as f64); n])]
            }
            Op::WeightedBce {
                prob,
                labels,
                pos_weight,
            } => {
                let clamp = T::of(LOG_CLAMP);
                let batch = T::of(labels.len() as f64);
                let gp = self
                    .value(*prob)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        let q = T::one() - p;
                        let d_pos = if p > clamp { *pos_weight * y / p } else { T::zero() };
                        let d_neg = if q > clamp { (T::one() - y) / q } else { T::zero() };
                        g[0] * (d_neg - d_pos) / batch
                    })
                    .collect();
                vec![(*prob, gp)]
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], d: usize| {
        let pad = rank - s.len();
        if d < pad {
            1
        } else {
            s[d - pad]
        }
    };
    (0..rank)
        .map(|d| match (dim(a, d), dim(b, d)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat index of `out`, the flat index of the broadcast input.
fn broadcast_map(input: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut stride = 1;
    for d in (0..input.len()).rev() {
        strides[d + pad] = if input[d] == 1 { 0 } else { stride };
        stride *= input[d];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let eye = tape.constant(Tensor::eye(2));
        let ones = tape.constant(mat(&[vec![1.0], vec![1.0]]));
        let col = tape.constant(mat(&[vec![5.0], vec![7.0]]));

        let p = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let p = tape.matmul(eye, col).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 7.0]);
        let p = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 1]);
        assert_eq!(tape.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(mat(&[vec![0.0, 0.0, 0.0]]));
        let y = tape.softmax(x, 1).unwrap();
        for v in tape.value(y).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let x = tape.constant(mat(&[vec![1000.0, 0.0]]));
        let y = tape.softmax(x, 1).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(y).data()[1], 0.0, epsilon = 1e-12);

        let x = tape.constant(mat(&[vec![2f64.ln(), 0.0]]));
        let y = tape.softmax(x, 1).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(y).data()[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(mat(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(Tensor::full(&[4], 1.0));
        let bias = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(mat(&[vec![5.0; 4]]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let gain2 = tape.constant(Tensor::full(&[2], 1.0));
        let bias2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(mat(&[vec![1.0, -1.0]]));
        let y = tape.layer_norm(x, gain2, bias2, 1e-5).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(tape.value(y).data()[1], -1.0, epsilon = 1e-5);

        let zero_gain = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(mat(&[vec![0.25, -3.0]]));
        let x = tape.constant(mat(&[vec![7.0, 2.0], vec![-1.0, 4.0]]));
        let y = tape.layer_norm(x, zero_gain, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -3.0, 0.25, -3.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);

        let x = tape.constant(mat(&[vec![-1.0, 2.0]]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let s = tape.scale(x, 3.0).unwrap();
        assert_eq!(tape.value(s).data(), &[-3.0, 6.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_rejects_bad_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[3, 3], 2.0));
        let y = tape.dropout(x, 0.2, false, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut rng),
            Err(TensorError::Param { .. })
        ));
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::<f64>::new();
        let values: Vec<f64> = (0..100_000).map(|i| 1.0 + (i % 10) as f64 * 0.1).collect();
        let expected = values.iter().sum::<f64>() / values.len() as f64;
        let x = tape.constant(Tensor::new(vec![values.len()], values).unwrap());
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let out = tape.value(y).data();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - expected).abs() / expected < 0.02, "{mean} vs {expected}");
        let zeros = out.iter().filter(|v| **v == 0.0).count() as f64 / out.len() as f64;
        assert!((zeros - 0.5).abs() < 0.01);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f32>::new();
        let cls = tape.constant(Tensor::full(&[1, 128], 0.5));
        let seq_data: Vec<f32> = (0..16 * 128).map(|i| i as f32).collect();
        let seq = tape.constant(Tensor::new(vec![16, 128], seq_data).unwrap());
        let joined = tape.concat(&[cls, seq], 0).unwrap();
        assert_eq!(tape.shape(joined), &[17, 128]);
        let first = tape.slice(joined, 0, 0..1).unwrap();
        assert_eq!(tape.value(first), tape.value(cls));
        let rest = tape.slice(joined, 0, 1..17).unwrap();
        assert_eq!(tape.value(rest), tape.value(seq));

        let tokens: Vec<Var> = (0..5)
            .map(|_| tape.constant(Tensor::zeros(&[1, 128])))
            .collect();
        let stacked = tape.concat(&tokens, 0).unwrap();
        assert_eq!(tape.shape(stacked), &[5, 128]);

        assert!(tape.slice(stacked, 0, 3..6).is_err());
        let bad = tape.constant(Tensor::zeros(&[1, 64]));
        assert!(tape.concat(&[cls, bad], 0).is_err());
    }

    #[test]
    fn concat_along_columns() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(mat(&[vec![1.0], vec![2.0]]));
        let b = tape.constant(mat(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 1..3).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }

    #[test]
    fn broadcast_add_row_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(mat(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let b = tape.param(mat(&[vec![10.0, 20.0]]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);

        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let y = tape.matmul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_through_softmax_sum_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(mat(&[vec![0.3, -1.2, 2.5, 0.0]]));
        let y = tape.softmax(x, 1).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(mat(&[vec![1.0, 2.0]]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 3.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.add(x, c).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn non_finite_output_is_reported_by_op() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(f32::MAX));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn bce_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::scalar(0.5));
        let l = tape.weighted_bce(p, &[1.0], 1.0).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 2f64.ln(), epsilon = 1e-15);
        let l = tape.weighted_bce(p, &[1.0], 2.0).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 2.0 * 2f64.ln(), epsilon = 1e-15);
        let l = tape.weighted_bce(p, &[0.0], 2.0).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 2f64.ln(), epsilon = 1e-15);

        let saturated = tape.constant(Tensor::scalar(0.0));
        let l = tape.weighted_bce(saturated, &[1.0], 1.0).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), -(LOG_CLAMP.ln()), epsilon = 1e-9);

        let bad = tape.constant(Tensor::scalar(1.5));
        assert!(tape.weighted_bce(bad, &[1.0], 1.0).is_err());
    }

    #[test]
    fn corrupted_rule_changes_gradient() {
        let mut tape = Tape::<f64>::with_corrupted_backward(OpKind::Sigmoid);
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        tape.backward(y).unwrap();
        assert_abs_diff_eq!(tape.grad(x).unwrap().item(), 0.375, epsilon = 1e-15);
    }

    #[test]
    fn op_kind_names_round_trip() {
        for k in ALL_KINDS {
            assert_eq!(OpKind::parse(k.name()), Some(k));
        }
        assert_eq!(OpKind::parse("conv2d"), None);
    }

    #[test]
    fn broadcast_helpers() {
        assert_eq!(broadcast_shape(&[3, 2], &[1, 2]), Some(vec![3, 2]));
        assert_eq!(broadcast_shape(&[3, 2], &[2]), Some(vec![3, 2]));
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 2], &[3]), None);
        assert_eq!(broadcast_map(&[1, 2], &[3, 2]), vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(broadcast_map(&[3, 1], &[3, 2]), vec![0, 0, 1, 1, 2, 2]);
    }
}
