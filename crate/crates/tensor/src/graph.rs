//! Reverse-mode tape.
//!
//! A [`Graph`] records primitive applications in creation order, which is a
//! topological order by construction. [`Graph::backward`] walks the nodes once
//! in reverse, skipping every node that has no grad-requiring ancestor.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::flops;
use crate::kernel::gemm;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{axis_split, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    MulRow { x: Var, row: Var },
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    CausalMask(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Tanh(Var),
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item().expect("scalar() on a multi-element node")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- leaves -------------------------------------------------------

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf bound to a stored parameter; shares its buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.param(id);
        self.nodes.push(Node {
            value: p.shared(),
            op: Op::Param(id),
            needs_grad: p.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`, without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), trans_b, &mut out, false);
        flops::record((m * k * n) as u64);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose2(r, c, self.val(x).data());
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), ng))
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x + y);
        let shape = self.val(a).shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), ng))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x * y);
        let shape = self.val(a).shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), ng))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var, allow_scalar: bool) -> Result<()> {
        let (sx, sr) = (self.val(x).shape(), self.val(row).shape());
        let width = sx.last().copied().unwrap_or(1);
        let ok = sr.len() == 1 && (sr[0] == width || (allow_scalar && sr[0] == 1));
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sx.to_vec(),
                right: sr.to_vec(),
            });
        }
        Ok(())
    }

    /// `x[..., n] + bias[n]`, broadcast over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_row("add_bias", x, bias, false)?;
        let b = self.val(bias).data();
        let mut data = self.val(x).data().to_vec();
        for chunk in data.chunks_mut(b.len()) {
            chunk.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let shape = self.val(x).shape().to_vec();
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias { x, bias }, ng))
    }

    /// `x[..., n] ⊙ row[n]`, broadcast over leading axes. A length-1 `row`
    /// scales every element (scalar gating).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", x, row, true)?;
        let r = self.val(row).data();
        let width = *self.val(x).shape().last().unwrap_or(&1);
        let mut data = self.val(x).data().to_vec();
        if r.len() == 1 {
            data.iter_mut().for_each(|v| *v *= r[0]);
        } else {
            for chunk in data.chunks_mut(width) {
                chunk.iter_mut().zip(r).for_each(|(v, g)| *v *= g);
            }
        }
        let shape = self.val(x).shape().to_vec();
        let ng = self.ng(&[x, row]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulRow { x, row }, ng))
    }

    /// Vector gating `x ⊙ tanh(alpha)`.
    pub fn gate(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let g = self.tanh(alpha);
        self.mul_row(x, g)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.val(x).data().iter().map(|v| v * factor).collect();
        let shape = self.val(x).shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Scale(x, factor), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.val(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.val(x).shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Tanh(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .val(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)).tanh()))
            .collect();
        let shape = self.val(x).shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Gelu(x), ng)
    }

    // ---- structural ----------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::ShapeMismatch {
            op: "concat",
            left: vec![],
            right: vec![],
        })?;
        let base = self.val(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.val(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.val(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.ng(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.val(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "slice", axis, shape });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let src = self.val(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    // ---- normalization and pooling --------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let shape = self.val(x).shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.val(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, ng))
    }

    /// Sets entries above the diagonal of a square score matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_mask",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let n = s[0];
        let mut data = self.val(x).data().to_vec();
        for i in 0..n {
            for v in &mut data[i * n + i + 1..(i + 1) * n] {
                *v = f64::NEG_INFINITY;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, n], data), Op::CausalMask(x), ng))
    }

    /// Per-row normalization over the last axis, then `gain ⊙ x̂ + bias`.
    /// `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check_row("layer_norm", x, gain, false)?;
        self.check_row("layer_norm", x, bias, false)?;
        let t = self.val(x);
        let (rows, d) = t.rows_cols();
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x, gain, bias]);
        if !ng {
            xhat = Vec::new();
            inv_std = Vec::new();
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Max over `axis`, which is removed from the shape. Ties resolve to the
    /// first occurrence, and backward routes each output gradient there.
    pub fn max_pool_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_pool_axis", x, axis)?;
        let t = self.val(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = (o * len) * inner + j;
                for i in 1..len {
                    let at = (o * len + i) * inner + j;
                    if src[at] > src[best] {
                        best = at;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool { x, argmax }, ng))
    }

    // ---- lookup and reductions -----------------------------------------

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.val(table);
        let s = t.shape();
        if s.len() != 2 || ids.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                left: s.to_vec(),
                right: vec![ids.len()],
            });
        }
        let (v, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.val(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: s.to_vec(),
                right: vec![targets.len()],
            });
        }
        let (n, v) = (s[0], s[1]);
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    bound: v,
                });
            }
            let row = &t.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[target];
            for j in 0..v {
                probs[r * v + j] = (row[j] - log_z).exp();
            }
        }
        let ng = self.ng(&[logits]);
        if !ng {
            probs = Vec::new();
        }
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let t = self.val(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += t.data()[base + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }, ng))
    }

    // ---- backward ------------------------------------------------------

    /// Chain-rule gradients of a scalar `loss` with respect to every
    /// grad-requiring leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.val(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let shape = node.value.shape().to_vec();
            match &node.op {
                Op::Input => {
                    out.inputs.insert(idx, Tensor::from_parts(shape, g));
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.params.insert(*id, Tensor::from_parts(shape, g));
                    }
                },
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (m, k) = (sa[0], sa[1]);
                let n = y.shape()[1];
                if self.wants(*a) {
                    // dA[m,k] = dC[m,n] · op(B)ᵀ
                    let buf = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.val(*b).data(), !*trans_b, buf, true);
                }
                if self.wants(*b) {
                    let buf = slot(grads, *b, sb[0] * sb[1]);
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        gemm(n, m, k, g, true, self.val(*a).data(), false, buf, true);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        gemm(k, m, n, self.val(*a).data(), true, g, false, buf, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.wants(*bias) {
                    let n = self.val(*bias).numel();
                    let buf = slot(grads, *bias, n);
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if self.wants(*a) {
                    let buf = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * vb[i];
                    }
                }
                if self.wants(*b) {
                    let buf = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * va[i];
                    }
                }
            }
            Op::MulRow { x, row } => {
                let r = self.val(*row).data();
                let xv = self.val(*x).data();
                let width = *y.shape().last().unwrap_or(&1);
                if self.wants(*x) {
                    let buf = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        let rv = if r.len() == 1 { r[0] } else { r[i % width] };
                        buf[i] += g[i] * rv;
                    }
                }
                if self.wants(*row) {
                    let buf = slot(grads, *row, r.len());
                    for i in 0..g.len() {
                        let j = if r.len() == 1 { 0 } else { i % width };
                        buf[j] += g[i] * xv[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    let buf = slot(grads, *x, g.len());
                    buf.iter_mut().zip(g).for_each(|(b, g)| *b += g * f);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.val(v).shape()[*axis];
                    if self.wants(v) {
                        let buf = slot(grads, v, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut buf[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let src_shape = self.val(*x).shape();
                    let (outer, alen, inner) = axis_split(src_shape, *axis);
                    let len = y.shape()[*axis];
                    let buf = slot(grads, *x, outer * alen * inner);
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        add_into(&mut buf[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = (y.shape()[0], y.shape()[1]);
                    let t = transpose2(r, c, g);
                    add_into(slot(grads, *x, g.len()), &t);
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_split(y.shape(), *axis);
                    let yv = y.data();
                    let buf = slot(grads, *x, g.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * yv[at(i)]).sum();
                            for i in 0..len {
                                buf[at(i)] += yv[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CausalMask(x) => {
                if self.wants(*x) {
                    let n = y.shape()[0];
                    let buf = slot(grads, *x, g.len());
                    for i in 0..n {
                        for j in 0..=i {
                            buf[i * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, d) = y.rows_cols();
                let gv = self.val(*gain).data();
                if self.wants(*gain) {
                    let buf = slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let buf = slot(grads, *bias, d);
                    for chunk in g.chunks(d) {
                        add_into(buf, chunk);
                    }
                }
                if self.wants(*x) {
                    let buf = slot(grads, *x, rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut mean_dx = 0.0;
                        let mut mean_dx_xhat = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            mean_dx += dxhat[j];
                            mean_dx_xhat += dxhat[j] * xhat[r * d + j];
                        }
                        mean_dx /= d as f64;
                        mean_dx_xhat /= d as f64;
                        for j in 0..d {
                            buf[r * d + j] +=
                                inv_std[r] * (dxhat[j] - mean_dx - xhat[r * d + j] * mean_dx_xhat);
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let n = self.val(*x).numel();
                    let buf = slot(grads, *x, n);
                    for (gi, &src) in g.iter().zip(argmax) {
                        buf[src] += gi;
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let buf = slot(grads, *x, g.len());
                    for (i, b) in buf.iter_mut().enumerate() {
                        let t = y.data()[i];
                        *b += g[i] * (1.0 - t * t);
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.val(*x).data();
                    let buf = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        let v = xv[i];
                        let inner = SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v);
                        let t = inner.tanh();
                        let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v);
                        buf[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let t = self.val(*table);
                    let d = t.shape()[1];
                    let buf = slot(grads, *table, t.numel());
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let n = targets.len();
                    let v = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let buf = slot(grads, *logits, n * v);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let buf = slot(grads, *x, self.val(*x).numel());
                    buf.iter_mut().for_each(|b| *b += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.val(*x).numel();
                    let buf = slot(grads, *x, n);
                    buf.iter_mut().for_each(|b| *b += g[0] / n as f64);
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_split(self.val(*x).shape(), *axis);
                    let buf = slot(grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for i in 0..len {
                            let base = (o * len + i) * inner;
                            for j in 0..inner {
                                buf[base + j] += g[o * inner + j] / len as f64;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose2(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}
