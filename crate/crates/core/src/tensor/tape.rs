use std::sync::Arc;

use rand::Rng;

use super::kernels::{broadcast_index_map, dot, mm_acc, mm_nt_acc, mm_tn_acc};
use super::{gelu, gelu_grad, softmax_slice, Result, Tensor, TensorError, IGNORE};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the output gradient and the
/// input values, returns one gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add {
        a: Var,
        b: Var,
        b_map: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        b_map: Option<Vec<usize>>,
    },
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of evaluated operations.
///
/// Records are pushed in evaluation order, so every input id precedes the
/// record that consumes it and a single reverse sweep visits each record once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros when no gradient reached `v`.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn as_matrix(t: &Tensor) -> Option<(usize, usize)> {
    (t.rank() == 2).then(|| (t.shape()[0], t.shape()[1]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (as_matrix(av), as_matrix(bv)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(shape_err("matmul", av, bv)),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        mm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = match (as_matrix(av), as_matrix(bv)) {
            (Some(x), Some(y)) if x.1 == y.1 => (x, y),
            _ => return Err(shape_err("matmul_nt", av, bv)),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        mm_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = as_matrix(av).ok_or_else(|| shape_err("transpose", av, av))?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn broadcast_map(&self, op: &'static str, a: Var, b: Var) -> Result<Option<Vec<usize>>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            return Ok(None);
        }
        broadcast_index_map(av.shape(), bv.shape())
            .map(Some)
            .ok_or_else(|| shape_err(op, av, bv))
    }

    /// `a + b`, where `b` may broadcast into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let b_map = self.broadcast_map("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = match &b_map {
            None => av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
            Some(map) => av
                .data()
                .iter()
                .zip(map)
                .map(|(x, &j)| x + bv.data()[j])
                .collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b, b_map }, &[a, b]))
    }

    /// `a ⊙ b`, where `b` may broadcast into the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let b_map = self.broadcast_map("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = match &b_map {
            None => av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
            Some(map) => av
                .data()
                .iter()
                .zip(map)
                .map(|(x, &j)| x * bv.data()[j])
                .collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b, b_map }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let value = Tensor::from_fn(av.shape(), |i| av.data()[i] * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::from_fn(av.shape(), |i| gelu(av.data()[i]));
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        if axis >= rank {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank,
            });
        }
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; xv.len()];
        let mut buf = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    buf[j] = xv.data()[(o * len + j) * inner + i];
                }
                softmax_slice(&buf, &mut res);
                for j in 0..len {
                    out[(o * len + j) * inner + i] = res[j];
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Row-wise softmax over a 2-D tensor restricted to entries where `allow`
    /// is true. Disallowed entries get probability 0; a row with no allowed
    /// entry becomes all zeros.
    pub fn masked_softmax(&mut self, x: Var, allow: &Arc<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || allow.len() != xv.len() {
            return Err(TensorError::Invalid(format!(
                "masked_softmax: mask of {} entries for shape {:?}",
                allow.len(),
                xv.shape()
            )));
        }
        let cols = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let ok = &allow[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for j in 0..cols {
                if ok[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::MaskedSoftmax(x), &[x]))
    }

    /// Layer normalisation over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean negative log-likelihood over rows whose label is not [`IGNORE`].
    /// With no supervised rows the loss is 0 and no gradient flows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let lv = self.value(logits);
        let classes = lv.cols();
        if lv.rank() != 2 || labels.len() != lv.rows() {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {} labels for logits {:?}",
                labels.len(),
                lv.shape()
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE && (l < 0 || l as usize >= classes))
        {
            return Err(TensorError::LabelRange {
                label: bad,
                classes,
            });
        }
        let count = labels.iter().filter(|&&l| l != IGNORE).count();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label == IGNORE {
                continue;
            }
            let row = lv.row(r);
            softmax_slice(row, &mut probs[r * classes..(r + 1) * classes]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label as usize];
        }
        if count > 0 {
            loss /= count as f64;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || targets.is_empty() {
            return Err(TensorError::Invalid(format!(
                "bce_with_logits: {} targets for {} logits",
                targets.len(),
                lv.len()
            )));
        }
        let loss = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Selects rows of a 2-D table (embedding lookup, row gathering).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = as_matrix(tv).ok_or_else(|| shape_err("gather_rows", tv, tv))?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather_rows: no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid(format!(
                "gather_rows: row {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            TensorError::Invalid("concat_rows: nothing to concatenate".into())
        })?);
        let d = first.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != d {
                return Err(shape_err("concat_rows", first, pv));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            TensorError::Invalid("concat_cols: nothing to concatenate".into())
        })?);
        let rows = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.rows() != rows {
                return Err(shape_err("concat_cols", first, pv));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = as_matrix(xv).ok_or_else(|| shape_err("slice_cols", xv, xv))?;
        if len == 0 || start + len > cols {
            return Err(TensorError::Invalid(format!(
                "slice_cols: [{start}, {}) out of {cols} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without recording.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let value = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * mask[i]);
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                self.accumulate(grads, *a, |ga| mm_nt_acc(g, bv.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| mm_tn_acc(av.data(), g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                self.accumulate(grads, *a, |ga| mm_acc(g, bv.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| mm_tn_acc(g, av.data(), gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] += g[i * m + j];
                        }
                    }
                });
            }
            Op::Add { a, b, b_map } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| match b_map {
                    None => add_into(gb, g),
                    Some(map) => {
                        for (&j, &gi) in map.iter().zip(g) {
                            gb[j] += gi;
                        }
                    }
                });
            }
            Op::Mul { a, b, b_map } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| match b_map {
                    None => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    Some(map) => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[map[i]];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| match b_map {
                    None => {
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                    Some(map) => {
                        for i in 0..g.len() {
                            gb[map[i]] += g[i] * av[i];
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi * c;
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(av[i]);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let s: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let y = out.data();
                let cols = out.cols();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let s = dot(yr, gr);
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |gg| {
                    for (i, &gi) in g.iter().enumerate() {
                        gg[i % n] += gi * xhat[i];
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; n];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let base = r * n;
                        for j in 0..n {
                            dxhat[j] = g[base + j] * gv[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = (0..n).map(|j| dxhat[j] * xhat[base + j]).sum();
                        for j in 0..n {
                            gx[base + j] += inv / n as f64
                                * (n as f64 * dxhat[j] - sum_d - xhat[base + j] * sum_dx);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = g[0] / *count as f64;
                let classes = self.value(*logits).cols();
                self.accumulate(grads, *logits, |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        if label == IGNORE {
                            continue;
                        }
                        for c in 0..classes {
                            gl[r * classes + c] += scale * probs[r * classes + c];
                        }
                        gl[r * classes + label as usize] -= scale;
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let scale = g[0] / targets.len() as f64;
                self.accumulate(grads, *logits, |gl| {
                    for i in 0..targets.len() {
                        let p = 1.0 / (1.0 + (-lv[i]).exp());
                        gl[i] += scale * (p - targets[i]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = out.cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..out.rows() {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let w = out.cols();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Custom { inputs, backward } => {
                let gout = Tensor {
                    shape: out.shape().to_vec(),
                    data: g.to_vec(),
                };
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gins = backward(&gout, &values);
                for (&v, gi) in inputs.iter().zip(gins) {
                    self.accumulate(grads, v, |slot| add_into(slot, gi.data()));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
