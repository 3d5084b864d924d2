//! The operation tape. Every forward op pushes a node holding its output
//! value and enough structure to replay the chain rule; `backward` walks the
//! nodes in reverse insertion order (reverse topological order for a
//! define-by-run graph) and accumulates adjoints. All arithmetic is f64.
//!
//! Broadcasting is deliberately narrow: elementwise binaries accept a
//! right-hand side whose shape is a trailing suffix of the left's (including
//! the scalar shape [1]); everything else must match exactly.

use super::Tensor;
use crate::special::{digamma, lgamma};
use crate::{Error, Result};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Elementwise unary operations. Domains are checked when the op is
/// recorded so the forward pass never manufactures NaN or infinity:
/// softplus treats inputs above 30 as identity, exp clamps its argument at
/// 700, and log/lgamma/log1p/recip/log1mexp/xlogx reject out-of-domain
/// values with a domain error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Sigmoid,
    Softplus,
    Log1p,
    Lgamma,
    Exp,
    Log,
    Gelu,
    Recip,
    Neg,
    Abs,
    Expm1,
    /// ln(1 - e^x) for x < 0.
    Log1mExp,
    /// x ln x with the convention 0 ln 0 = 0, for x >= 0.
    XLogX,
}

const SOFTPLUS_CLAMP: f64 = 30.0;
const EXP_CLAMP: f64 = 700.0;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddScalar { a: TensorId },
    MulScalar { a: TensorId, c: f64 },
    Matmul { a: TensorId, b: TensorId },
    Bmm { a: TensorId, b: TensorId },
    Permute { a: TensorId, perm: Vec<usize> },
    Reshape { a: TensorId },
    Row { a: TensorId, index: usize },
    Col { a: TensorId, index: usize },
    GatherRows { a: TensorId, indices: Vec<usize> },
    ScatterRows { a: TensorId, indices: Vec<usize> },
    ScaleRows { a: TensorId, s: TensorId },
    Unary { a: TensorId, kind: UnaryKind },
    Clamp { a: TensorId, lo: f64, hi: f64 },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { a: TensorId, scale: TensorId, shift: TensorId },
    Sum { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    StopGradient,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Outcome of a backward pass. `rules_executed` counts the non-leaf nodes
/// whose adjoint rule ran (each exactly once).
#[derive(Debug, Clone, Copy)]
pub struct BackwardStats {
    pub rules_executed: usize,
}

/// Define-by-run reverse-mode tape. Build one per forward pass; it is not
/// Sync and stays on the thread that created it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

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

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Register an input node. Leaves receive gradients but have no inputs
    /// of their own.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: &[usize], values: &[f64]) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), values.to_vec())?))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Accumulated gradient after `backward`, None if no gradient flowed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node's value; zeros when no
    /// gradient flowed (nodes off the loss path get exact zero).
    pub fn grad_tensor(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Tensor {
                shape: node.value.shape.clone(),
                values: g.clone(),
            },
            None => Tensor::zeros(&node.value.shape),
        }
    }

    // ── elementwise binaries ────────────────────────────────────────────

    fn broadcast_len(&self, a: TensorId, b: TensorId, what: &str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bn = self.nodes[b.0].value.numel();
        let ok = bn == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !ok {
            return Err(Error::Shape(format!(
                "{what}: rhs shape {sb:?} is neither scalar nor a trailing suffix of lhs {sa:?}"
            )));
        }
        Ok(bn)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let bn = self.broadcast_len(a, b, "add")?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value.values;
        let values = av
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % bn])
            .collect();
        let out = Tensor {
            shape: av.shape.clone(),
            values,
        };
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let bn = self.broadcast_len(a, b, "sub")?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value.values;
        let values = av
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x - bv[i % bn])
            .collect();
        let out = Tensor {
            shape: av.shape.clone(),
            values,
        };
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let bn = self.broadcast_len(a, b, "mul")?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value.values;
        let values = av
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % bn])
            .collect();
        let out = Tensor {
            shape: av.shape.clone(),
            values,
        };
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let av = &self.nodes[a.0].value;
        let out = Tensor {
            shape: av.shape.clone(),
            values: av.values.iter().map(|&x| x + c).collect(),
        };
        self.push(out, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let av = &self.nodes[a.0].value;
        let out = Tensor {
            shape: av.shape.clone(),
            values: av.values.iter().map(|&x| x * c).collect(),
        };
        self.push(out, Op::MulScalar { a, c })
    }

    // ── matrix products ─────────────────────────────────────────────────

    /// 2-D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects rank-2 operands, got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let mut values = vec![0.0; m * n];
        mm_nn(
            &self.nodes[a.0].value.values,
            &self.nodes[b.0].value.values,
            m,
            k,
            n,
            &mut values,
        );
        let out = Tensor {
            shape: vec![m, n],
            values,
        };
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// Batched matrix product: [..., m, k] x [..., k, n] -> [..., m, n] with
    /// identical leading dimensions.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::Shape(format!(
                "bmm expects equal leading dims and rank >= 2, got {sa:?} x {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "bmm inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let batches: usize = sa[..sa.len() - 2].iter().product();
        let mut values = vec![0.0; batches * m * n];
        let av = &self.nodes[a.0].value.values;
        let bv = &self.nodes[b.0].value.values;
        for t in 0..batches {
            mm_nn(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
                &mut values[t * m * n..(t + 1) * m * n],
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let out = Tensor { shape, values };
        Ok(self.push(out, Op::Bmm { a, b }))
    }

    // ── structural ops ──────────────────────────────────────────────────

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let rank = sa.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "permute: {perm:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let av = &self.nodes[a.0].value.values;
        let mut values = vec![0.0; av.len()];
        permute_copy(av, &sa, perm, &mut values, false);
        let out = Tensor {
            shape: out_shape,
            values,
        };
        Ok(self.push(
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != av.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} ({} values) cannot become {shape:?}",
                av.shape,
                av.numel()
            )));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            values: av.values.clone(),
        };
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Slice along the first axis: [R, rest...] -> [rest...].
    pub fn row(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Shape(format!("row needs rank >= 2, got {sa:?}")));
        }
        if index >= sa[0] {
            return Err(Error::Shape(format!(
                "row index {index} out of bounds for {sa:?}"
            )));
        }
        let width: usize = sa[1..].iter().product();
        let values = self.nodes[a.0].value.values[index * width..(index + 1) * width].to_vec();
        let out = Tensor {
            shape: sa[1..].to_vec(),
            values,
        };
        Ok(self.push(out, Op::Row { a, index }))
    }

    /// Slice one column of a rank-2 tensor: [R, C] -> [R].
    pub fn col(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Shape(format!("col needs rank 2, got {sa:?}")));
        }
        if index >= sa[1] {
            return Err(Error::Shape(format!(
                "col index {index} out of bounds for {sa:?}"
            )));
        }
        let av = &self.nodes[a.0].value.values;
        let values = (0..sa[0]).map(|r| av[r * sa[1] + index]).collect();
        let out = Tensor {
            shape: vec![sa[0]],
            values,
        };
        Ok(self.push(out, Op::Col { a, index }))
    }

    /// Select rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Shape(format!(
                "gather_rows needs rank >= 2, got {sa:?}"
            )));
        }
        if indices.is_empty() {
            return Err(Error::Shape("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= sa[0]) {
            return Err(Error::Shape(format!(
                "gather_rows index {bad} out of bounds for {sa:?}"
            )));
        }
        let width: usize = sa[1..].iter().product();
        let av = &self.nodes[a.0].value.values;
        let mut values = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            values.extend_from_slice(&av[i * width..(i + 1) * width]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&sa[1..]);
        let out = Tensor { shape, values };
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Scatter rows of [K, rest...] into a zero tensor of [n_rows, rest...];
    /// repeated indices accumulate.
    pub fn scatter_rows(&mut self, a: TensorId, indices: &[usize], n_rows: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Shape(format!(
                "scatter_rows needs rank >= 2, got {sa:?}"
            )));
        }
        if indices.len() != sa[0] {
            return Err(Error::Shape(format!(
                "scatter_rows: {} indices for {} rows",
                indices.len(),
                sa[0]
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Shape(format!(
                "scatter_rows index {bad} out of bounds for target {n_rows}"
            )));
        }
        let width: usize = sa[1..].iter().product();
        let av = &self.nodes[a.0].value.values;
        let mut values = vec![0.0; n_rows * width];
        for (r, &dst) in indices.iter().enumerate() {
            let src = &av[r * width..(r + 1) * width];
            let out = &mut values[dst * width..(dst + 1) * width];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += v;
            }
        }
        let mut shape = vec![n_rows];
        shape.extend_from_slice(&sa[1..]);
        let out = Tensor { shape, values };
        Ok(self.push(
            out,
            Op::ScatterRows {
                a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Multiply each row block of [R, rest...] by the matching entry of a
    /// length-R vector.
    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let ss = self.shape(s).to_vec();
        if sa.len() < 2 || ss != vec![sa[0]] {
            return Err(Error::Shape(format!(
                "scale_rows: expected [R, ...] and [R], got {sa:?} and {ss:?}"
            )));
        }
        let width: usize = sa[1..].iter().product();
        let av = &self.nodes[a.0].value.values;
        let sv = &self.nodes[s.0].value.values;
        let mut values = Vec::with_capacity(av.len());
        for (r, &scale) in sv.iter().enumerate() {
            values.extend(av[r * width..(r + 1) * width].iter().map(|&x| x * scale));
        }
        let out = Tensor {
            shape: sa,
            values,
        };
        Ok(self.push(out, Op::ScaleRows { a, s }))
    }

    // ── unary, clamp ────────────────────────────────────────────────────

    pub fn unary(&mut self, kind: UnaryKind, a: TensorId) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        if let Some((pred, what)) = unary_domain(kind) {
            if let Some(&bad) = av.values.iter().find(|&&x| !pred(x)) {
                return Err(Error::Domain(format!(
                    "{kind:?} requires {what}, got {bad}"
                )));
            }
        }
        let values = av.values.iter().map(|&x| unary_fwd(kind, x)).collect();
        let out = Tensor {
            shape: av.shape.clone(),
            values,
        };
        Ok(self.push(out, Op::Unary { a, kind }))
    }

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Silu, a)
    }
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Softplus, a)
    }
    pub fn log1p(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Log1p, a)
    }
    pub fn lgamma(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Lgamma, a)
    }
    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Log, a)
    }
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Gelu, a)
    }
    pub fn recip(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Recip, a)
    }
    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn expm1(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Expm1, a)
    }
    pub fn log1mexp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Log1mExp, a)
    }
    pub fn xlogx(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::XLogX, a)
    }

    /// Elementwise clamp to [lo, hi]. Gradient passes only strictly inside
    /// the interval.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo < hi) {
            return Err(Error::Usage(format!("clamp: lo {lo} must be < hi {hi}")));
        }
        let av = &self.nodes[a.0].value;
        let values = av.values.iter().map(|&x| x.clamp(lo, hi)).collect();
        let out = Tensor {
            shape: av.shape.clone(),
            values,
        };
        Ok(self.push(out, Op::Clamp { a, lo, hi }))
    }

    // ── softmax, layer norm, reductions ─────────────────────────────────

    /// Numerically stable softmax along `axis` (max subtracted per lane).
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {sa:?}"
            )));
        }
        let (outer, len, inner) = lane_dims(&sa, axis);
        let av = &self.nodes[a.0].value.values;
        let mut values = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(av[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (av[idx(j)] - max).exp();
                    values[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    values[idx(j)] /= sum;
                }
            }
        }
        let out = Tensor { shape: sa, values };
        Ok(self.push(out, Op::Softmax { a, axis }))
    }

    /// Layer normalization over the last axis with learnable scale and
    /// shift (each shaped like the last axis).
    pub fn layer_norm(&mut self, a: TensorId, scale: TensorId, shift: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().expect("non-empty shape");
        if self.shape(scale) != [n] || self.shape(shift) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: scale/shift must be [{n}], got {:?} and {:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let av = &self.nodes[a.0].value.values;
        let sc = &self.nodes[scale.0].value.values;
        let sh = &self.nodes[shift.0].value.values;
        let mut values = vec![0.0; av.len()];
        for (row, out_row) in av.chunks_exact(n).zip(values.chunks_exact_mut(n)) {
            let (mu, sd) = row_moments(row);
            for j in 0..n {
                out_row[j] = sc[j] * (row[j] - mu) / sd + sh[j];
            }
        }
        let out = Tensor { shape: sa, values };
        Ok(self.push(out, Op::LayerNorm { a, scale, shift }))
    }

    /// Sum of all elements, shape [1].
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].value.values.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    /// Mean of all elements, shape [1].
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum out one axis; a rank-1 input reduces to shape [1].
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Shape(format!(
                "sum_axis {axis} out of range for {sa:?}"
            )));
        }
        let (outer, len, inner) = lane_dims(&sa, axis);
        let av = &self.nodes[a.0].value.values;
        let mut values = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    values[o * inner + i] += av[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape: Vec<usize> = sa
            .iter()
            .enumerate()
            .filter(|&(ax, _)| ax != axis)
            .map(|(_, &d)| d)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor { shape, values };
        Ok(self.push(out, Op::SumAxis { a, axis }))
    }

    /// Identity forward (bitwise), blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, a: TensorId) -> TensorId {
        let out = self.nodes[a.0].value.clone();
        self.push(out, Op::StopGradient)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Each reachable node's adjoint
    /// rule executes exactly once; nodes off the loss path keep a zero
    /// gradient. A second call without rebuilding the tape is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<BackwardStats> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; rebuild the graph first".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        let mut rules = 0;
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (head, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let g = node.grad.as_ref().expect("checked above");
            apply_backward(&node.op, &node.value, g, head);
            rules += 1;
        }
        Ok(BackwardStats {
            rules_executed: rules,
        })
    }
}

// ── forward helpers ─────────────────────────────────────────────────────

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, (var + LAYER_NORM_EPS).sqrt())
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_fwd(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Silu => x * sigmoid_scalar(x),
        UnaryKind::Sigmoid => sigmoid_scalar(x),
        UnaryKind::Softplus => {
            if x > SOFTPLUS_CLAMP {
                x
            } else {
                x.exp().ln_1p()
            }
        }
        UnaryKind::Log1p => x.ln_1p(),
        UnaryKind::Lgamma => lgamma(x),
        UnaryKind::Exp => x.min(EXP_CLAMP).exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        UnaryKind::Recip => 1.0 / x,
        UnaryKind::Neg => -x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Expm1 => x.exp_m1(),
        UnaryKind::Log1mExp => {
            if x > -std::f64::consts::LN_2 {
                (-x.exp_m1()).ln()
            } else {
                (-x.exp()).ln_1p()
            }
        }
        UnaryKind::XLogX => {
            if x == 0.0 {
                0.0
            } else {
                x * x.ln()
            }
        }
    }
}

fn unary_bwd(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Silu => {
            let s = sigmoid_scalar(x);
            s * (1.0 + x * (1.0 - s))
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Softplus => {
            if x > SOFTPLUS_CLAMP {
                1.0
            } else {
                sigmoid_scalar(x)
            }
        }
        UnaryKind::Log1p => 1.0 / (1.0 + x),
        UnaryKind::Lgamma => digamma(x),
        UnaryKind::Exp => {
            if x < EXP_CLAMP {
                y
            } else {
                0.0
            }
        }
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        UnaryKind::Recip => -y * y,
        UnaryKind::Neg => -1.0,
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Expm1 => x.exp(),
        UnaryKind::Log1mExp => -1.0 / (-x).exp_m1(),
        UnaryKind::XLogX => {
            if x == 0.0 {
                0.0
            } else {
                x.ln() + 1.0
            }
        }
    }
}

#[allow(clippy::type_complexity)]
fn unary_domain(kind: UnaryKind) -> Option<(fn(f64) -> bool, &'static str)> {
    match kind {
        UnaryKind::Log1p => Some((|x| x > -1.0, "inputs > -1")),
        UnaryKind::Lgamma => Some((|x| x > 0.0, "positive inputs")),
        UnaryKind::Log => Some((|x| x > 0.0, "positive inputs")),
        UnaryKind::Recip => Some((|x| x != 0.0, "nonzero inputs")),
        UnaryKind::Log1mExp => Some((|x| x < 0.0, "negative inputs")),
        UnaryKind::XLogX => Some((|x| x >= 0.0, "nonnegative inputs")),
        _ => None,
    }
}

fn permute_copy(src: &[f64], in_shape: &[usize], perm: &[usize], dst: &mut [f64], transpose_back: bool) {
    let rank = in_shape.len();
    // out axis j corresponds to in axis perm[j]
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut out_strides = vec![1usize; rank];
    for j in (0..rank.saturating_sub(1)).rev() {
        out_strides[j] = out_strides[j + 1] * out_shape[j + 1];
    }
    // contribution of in axis k to the out flat index
    let mut mapped = vec![0usize; rank];
    for (j, &p) in perm.iter().enumerate() {
        mapped[p] = out_strides[j];
    }
    let mut idx = vec![0usize; rank];
    let mut out_flat = 0usize;
    for in_flat in 0..src.len() {
        if transpose_back {
            // src holds output-ordered adjoints; dst is input-ordered
            dst[in_flat] += src[out_flat];
        } else {
            dst[out_flat] = src[in_flat];
        }
        // odometer increment over the input index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            out_flat += mapped[ax];
            if idx[ax] < in_shape[ax] {
                break;
            }
            out_flat -= mapped[ax] * in_shape[ax];
            idx[ax] = 0;
        }
    }
}

// Matrix kernels; all accumulate into `out`.

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // out[m,n] += a[m,k] . b[n,k]^T
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // out[k,n] += a[m,k]^T . b[m,n]
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

// ── backward rules ──────────────────────────────────────────────────────

fn grad_buf<'n>(nodes: &'n mut [Node], id: TensorId) -> &'n mut Vec<f64> {
    let numel = nodes[id.0].value.numel();
    nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel])
}

fn apply_backward(op: &Op, value: &Tensor, g: &[f64], nodes: &mut [Node]) {
    match *op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            let bn = nodes[b.0].value.numel();
            {
                let da = grad_buf(nodes, a);
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            let db = grad_buf(nodes, b);
            for (i, &gv) in g.iter().enumerate() {
                db[i % bn] += gv;
            }
        }
        Op::Sub { a, b } => {
            let bn = nodes[b.0].value.numel();
            {
                let da = grad_buf(nodes, a);
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            let db = grad_buf(nodes, b);
            for (i, &gv) in g.iter().enumerate() {
                db[i % bn] -= gv;
            }
        }
        Op::Mul { a, b } => {
            let bn = nodes[b.0].value.numel();
            let bv = nodes[b.0].value.values.clone();
            let av = nodes[a.0].value.values.clone();
            {
                let da = grad_buf(nodes, a);
                for (i, &gv) in g.iter().enumerate() {
                    da[i] += gv * bv[i % bn];
                }
            }
            let db = grad_buf(nodes, b);
            for (i, &gv) in g.iter().enumerate() {
                db[i % bn] += gv * av[i];
            }
        }
        Op::AddScalar { a } => {
            let da = grad_buf(nodes, a);
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv;
            }
        }
        Op::MulScalar { a, c } => {
            let da = grad_buf(nodes, a);
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv * c;
            }
        }
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
            let n = nodes[b.0].value.shape[1];
            let av = nodes[a.0].value.values.clone();
            let bv = nodes[b.0].value.values.clone();
            mm_nt(g, &bv, m, n, k, grad_buf(nodes, a));
            mm_tn(&av, g, m, k, n, grad_buf(nodes, b));
        }
        Op::Bmm { a, b } => {
            let sa = nodes[a.0].value.shape.clone();
            let sb = nodes[b.0].value.shape.clone();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            let batches: usize = sa[..sa.len() - 2].iter().product();
            let av = nodes[a.0].value.values.clone();
            let bv = nodes[b.0].value.values.clone();
            {
                let da = grad_buf(nodes, a);
                for t in 0..batches {
                    mm_nt(
                        &g[t * m * n..(t + 1) * m * n],
                        &bv[t * k * n..(t + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[t * m * k..(t + 1) * m * k],
                    );
                }
            }
            let db = grad_buf(nodes, b);
            for t in 0..batches {
                mm_tn(
                    &av[t * m * k..(t + 1) * m * k],
                    &g[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                    &mut db[t * k * n..(t + 1) * k * n],
                );
            }
        }
        Op::Permute { a, ref perm } => {
            let in_shape = nodes[a.0].value.shape.clone();
            let da = grad_buf(nodes, a);
            permute_copy(g, &in_shape, perm, da, true);
        }
        Op::Reshape { a } => {
            let da = grad_buf(nodes, a);
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv;
            }
        }
        Op::Row { a, index } => {
            let width = value.numel();
            let da = grad_buf(nodes, a);
            let dst = &mut da[index * width..(index + 1) * width];
            for (d, &gv) in dst.iter_mut().zip(g) {
                *d += gv;
            }
        }
        Op::Col { a, index } => {
            let cols = nodes[a.0].value.shape[1];
            let da = grad_buf(nodes, a);
            for (r, &gv) in g.iter().enumerate() {
                da[r * cols + index] += gv;
            }
        }
        Op::GatherRows { a, ref indices } => {
            let width: usize = nodes[a.0].value.shape[1..].iter().product();
            let da = grad_buf(nodes, a);
            for (r, &src_row) in indices.iter().enumerate() {
                let grow = &g[r * width..(r + 1) * width];
                let dst = &mut da[src_row * width..(src_row + 1) * width];
                for (d, &gv) in dst.iter_mut().zip(grow) {
                    *d += gv;
                }
            }
        }
        Op::ScatterRows { a, ref indices } => {
            let width: usize = nodes[a.0].value.shape[1..].iter().product();
            let da = grad_buf(nodes, a);
            for (r, &dst_row) in indices.iter().enumerate() {
                let grow = &g[dst_row * width..(dst_row + 1) * width];
                let dst = &mut da[r * width..(r + 1) * width];
                for (d, &gv) in dst.iter_mut().zip(grow) {
                    *d += gv;
                }
            }
        }
        Op::ScaleRows { a, s } => {
            let width: usize = nodes[a.0].value.shape[1..].iter().product();
            let av = nodes[a.0].value.values.clone();
            let sv = nodes[s.0].value.values.clone();
            {
                let da = grad_buf(nodes, a);
                for (r, &scale) in sv.iter().enumerate() {
                    for i in r * width..(r + 1) * width {
                        da[i] += g[i] * scale;
                    }
                }
            }
            let ds = grad_buf(nodes, s);
            for (r, d) in ds.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in r * width..(r + 1) * width {
                    acc += g[i] * av[i];
                }
                *d += acc;
            }
        }
        Op::Unary { a, kind } => {
            let xs = nodes[a.0].value.values.clone();
            let da = grad_buf(nodes, a);
            for (i, &gv) in g.iter().enumerate() {
                da[i] += gv * unary_bwd(kind, xs[i], value.values[i]);
            }
        }
        Op::Clamp { a, lo, hi } => {
            let xs = nodes[a.0].value.values.clone();
            let da = grad_buf(nodes, a);
            for (i, &gv) in g.iter().enumerate() {
                if xs[i] > lo && xs[i] < hi {
                    da[i] += gv;
                }
            }
        }
        Op::Softmax { a, axis } => {
            let shape = value.shape.clone();
            let (outer, len, inner) = lane_dims(&shape, axis);
            let y = &value.values;
            let da = grad_buf(nodes, a);
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let mut dot = 0.0;
                    for j in 0..len {
                        dot += g[idx(j)] * y[idx(j)];
                    }
                    for j in 0..len {
                        da[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, scale, shift } => {
            let n = *value.shape.last().expect("non-empty");
            let xs = nodes[a.0].value.values.clone();
            let sc = nodes[scale.0].value.values.clone();
            let rows = xs.len() / n;
            {
                let da = grad_buf(nodes, a);
                for r in 0..rows {
                    let row = &xs[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let (mu, sd) = row_moments(row);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (row[j] - mu) / sd;
                        let dxhat = grow[j] * sc[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        let xhat = (row[j] - mu) / sd;
                        let dxhat = grow[j] * sc[j];
                        da[r * n + j] += (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) / sd;
                    }
                }
            }
            {
                let dscale = grad_buf(nodes, scale);
                for r in 0..rows {
                    let row = &xs[r * n..(r + 1) * n];
                    let (mu, sd) = row_moments(row);
                    for j in 0..n {
                        dscale[j] += g[r * n + j] * (row[j] - mu) / sd;
                    }
                }
            }
            let dshift = grad_buf(nodes, shift);
            for r in 0..rows {
                for j in 0..n {
                    dshift[j] += g[r * n + j];
                }
            }
        }
        Op::Sum { a } => {
            let da = grad_buf(nodes, a);
            for d in da.iter_mut() {
                *d += g[0];
            }
        }
        Op::SumAxis { a, axis } => {
            let shape = nodes[a.0].value.shape.clone();
            let (outer, len, inner) = lane_dims(&shape, axis);
            let da = grad_buf(nodes, a);
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        da[(o * len + j) * inner + i] += g[o * inner + i];
                    }
                }
            }
        }
        Op::StopGradient => {}
    }
}
