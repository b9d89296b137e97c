//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, stores its output, and records how to push an output gradient
//! back onto its inputs. Because nodes can only reference earlier nodes the
//! list is always topologically ordered, so [`Graph::backward`] is a single
//! reverse sweep.

use super::{NumericsError, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    XLogX(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanRows(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Gather { src: Var, index: Vec<usize> },
    RowOuter(Var, Var),
    SelectRows { a: Var, b: Var, take_a: Vec<bool> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record list plus the gradient accumulators of its leaves.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above and `c`
    // does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

/// `x ln x` with the convention `0 ln 0 = 0`.
pub fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("gradient matches its leaf shape")
        })
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op_name, &[va.shape(), vb.shape()]));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.len() != va.cols() {
            return Err(mismatch("add_row", &[va.shape(), vr.shape()]));
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vr.data()[i % cols])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(mismatch("matmul", &[va.shape(), vb.shape()]));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (va.data(), k as isize, 1),
            (vb.data(), n as isize, 1),
            &mut out,
            false,
        );
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyInput("concat"))?;
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(mismatch("concat", &shapes));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = self.shape(first).to_vec();
        *shape.last_mut().expect("non-empty shape") = total;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, src: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let v = self.value(src);
        if start >= end || end > v.cols() {
            return Err(NumericsError::SliceOutOfRange {
                shape: v.shape().to_vec(),
                start,
                end,
            });
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = end - start;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(out, Op::Slice { src, start }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Elementwise `x ln x` (zero at zero); building block for entropies.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(a, xlogx, Op::XLogX(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut data = vec![0.0; v.len()];
        for (src, dst) in v.data().chunks(cols).zip(data.chunks_mut(cols)) {
            softmax_row(src, dst);
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut data = vec![0.0; v.len()];
        for (src, dst) in v.data().chunks(cols).zip(data.chunks_mut(cols)) {
            log_softmax_row(src, dst);
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Sum over the last axis, keeping it as a unit axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data: Vec<f64> = v.data().chunks(v.cols()).map(|r| r.iter().sum()).collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = 1;
        let out = Tensor::new(shape, data).expect("consistent shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::SumLast(a), rg)
    }

    /// Mean over rows: `rows x cols -> 1 x cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, &x) in data.iter_mut().zip(v.row(r)) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= rows as f64);
        let out = Tensor::new(vec![1, cols], data).expect("consistent shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Row lookup into a `vocab x dim` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(mismatch("embedding", &[t.shape()]));
        }
        if ids.is_empty() {
            return Err(NumericsError::EmptyInput("embedding"));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `src[r, index[r]]` for every row, giving a `rows x 1` column.
    pub fn gather(&mut self, src: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(src);
        if index.len() != v.rows() {
            return Err(mismatch("gather", &[v.shape(), &[index.len()]]));
        }
        let cols = v.cols();
        let mut data = Vec::with_capacity(index.len());
        for (r, &i) in index.iter().enumerate() {
            if i >= cols {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    bound: cols,
                });
            }
            data.push(v.row(r)[i]);
        }
        let out = Tensor::new(vec![index.len(), 1], data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(
            out,
            Op::Gather {
                src,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row outer product: `(rows x p, rows x q) -> rows x (p*q)`, with
    /// column `i*q + j` holding `a[r,i] * b[r,j]`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(mismatch("row_outer", &[va.shape(), vb.shape()]));
        }
        let (rows, p, q) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(rows * p * q);
        for r in 0..rows {
            for &x in va.row(r) {
                data.extend(vb.row(r).iter().map(|&y| x * y));
            }
        }
        let out = Tensor::new(vec![rows, p * q], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::RowOuter(a, b), rg))
    }

    /// Row-wise choice between two same-shape matrices: row `r` comes from
    /// `a` when `take_a[r]`, otherwise from `b`. Values are copied exactly.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || take_a.len() != va.rows() {
            return Err(mismatch("select_rows", &[va.shape(), vb.shape(), &[take_a.len()]]));
        }
        let mut data = Vec::with_capacity(va.len());
        for (r, &t) in take_a.iter().enumerate() {
            data.extend_from_slice(if t { va.row(r) } else { vb.row(r) });
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::SelectRows {
                a,
                b,
                take_a: take_a.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
        }

        for i in (0..n).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf => {
                    let acc = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(s) = slot(&mut grads, nodes, v) {
                            s.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        s.iter_mut().zip(&g).for_each(|(s, d)| *s -= d);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, d), y) in s.iter_mut().zip(&g).zip(vb.data()) {
                            *s += d * y;
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        for ((s, d), x) in s.iter_mut().zip(&g).zip(va.data()) {
                            *s += d * x;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                    }
                    let cols = out.cols();
                    if let Some(s) = slot(&mut grads, nodes, *row) {
                        for (j, d) in g.iter().enumerate() {
                            s[j % cols] += d;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(s, d)| *s += c * d);
                    }
                }
                Op::AddScalar(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, nn) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        // dA = dC * B^T
                        gemm(m, nn, k, (&g, nn as isize, 1), (vb.data(), 1, nn as isize), s, true);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        // dB = A^T * dC
                        gemm(k, m, nn, (va.data(), 1, k as isize), (&g, nn as isize, 1), s, true);
                    }
                }
                Op::Concat(parts) => {
                    let rows = out.rows();
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        if let Some(s) = slot(&mut grads, nodes, p) {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                s[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(s, d)| *s += d);
                            }
                        }
                        offset += w;
                    }
                }
                Op::Slice { src, start } => {
                    let w = out.cols();
                    let full = nodes[src.0].value.cols();
                    if let Some(s) = slot(&mut grads, nodes, *src) {
                        for r in 0..out.rows() {
                            s[r * full + start..r * full + start + w]
                                .iter_mut()
                                .zip(&g[r * w..(r + 1) * w])
                                .for_each(|(s, d)| *s += d);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, d), y) in s.iter_mut().zip(&g).zip(out.data()) {
                            *s += d * y * (1.0 - y);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, d), y) in s.iter_mut().zip(&g).zip(out.data()) {
                            *s += d * (1.0 - y * y);
                        }
                    }
                }
                Op::Exp(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, d), y) in s.iter_mut().zip(&g).zip(out.data()) {
                            *s += d * y;
                        }
                    }
                }
                Op::Log(a) => {
                    let va = &nodes[a.0].value;
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, d), x) in s.iter_mut().zip(&g).zip(va.data()) {
                            *s += d / x;
                        }
                    }
                }
                Op::Abs(a) => {
                    let va = &nodes[a.0].value;
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, d), x) in s.iter_mut().zip(&g).zip(va.data()) {
                            // subgradient 0 at the kink
                            let sign = if *x > 0.0 {
                                1.0
                            } else if *x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *s += d * sign;
                        }
                    }
                }
                Op::SelectRows { a, b, take_a } => {
                    let cols = out.cols();
                    for (v, want) in [(*a, true), (*b, false)] {
                        if let Some(s) = slot(&mut grads, nodes, v) {
                            for (r, &t) in take_a.iter().enumerate() {
                                if t == want {
                                    s[r * cols..(r + 1) * cols]
                                        .iter_mut()
                                        .zip(&g[r * cols..(r + 1) * cols])
                                        .for_each(|(s, d)| *s += d);
                                }
                            }
                        }
                    }
                }
                Op::XLogX(a) => {
                    let va = &nodes[a.0].value;
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, d), x) in s.iter_mut().zip(&g).zip(va.data()) {
                            *s += d * (x.max(1e-300).ln() + 1.0);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let cols = out.cols();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, d), y) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols)) {
                            let dot: f64 = d.iter().zip(y).map(|(d, y)| d * y).sum();
                            for ((s, d), y) in s.iter_mut().zip(d).zip(y) {
                                *s += y * (d - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let cols = out.cols();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, d), lp) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols)) {
                            let total: f64 = d.iter().sum();
                            for ((s, d), lp) in s.iter_mut().zip(d).zip(lp) {
                                *s += d - lp.exp() * total;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().for_each(|s| *s += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        let scale = g[0] / s.len() as f64;
                        s.iter_mut().for_each(|s| *s += scale);
                    }
                }
                Op::SumLast(a) => {
                    let cols = nodes[a.0].value.cols();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for (row, d) in s.chunks_mut(cols).zip(&g) {
                            row.iter_mut().for_each(|s| *s += d);
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let va = &nodes[a.0].value;
                    let (rows, cols) = (va.rows(), va.cols());
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for row in s.chunks_mut(cols) {
                            for (s, d) in row.iter_mut().zip(&g) {
                                *s += d / rows as f64;
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let dim = out.cols();
                    if let Some(s) = slot(&mut grads, nodes, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            s[id * dim..(id + 1) * dim]
                                .iter_mut()
                                .zip(&g[r * dim..(r + 1) * dim])
                                .for_each(|(s, d)| *s += d);
                        }
                    }
                }
                Op::Gather { src, index } => {
                    let cols = nodes[src.0].value.cols();
                    if let Some(s) = slot(&mut grads, nodes, *src) {
                        for (r, &i) in index.iter().enumerate() {
                            s[r * cols + i] += g[r];
                        }
                    }
                }
                Op::RowOuter(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (p, q) = (va.cols(), vb.cols());
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for r in 0..va.rows() {
                            for i in 0..p {
                                let base = r * p * q + i * q;
                                let dot: f64 = g[base..base + q].iter().zip(vb.row(r)).map(|(d, y)| d * y).sum();
                                s[r * p + i] += dot;
                            }
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        for r in 0..va.rows() {
                            for (i, x) in va.row(r).iter().enumerate() {
                                let base = r * p * q + i * q;
                                for (s, d) in s[r * q..(r + 1) * q].iter_mut().zip(&g[base..base + q]) {
                                    *s += d * x;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_one_two_three_matches_hand_evaluation() {
        // e^1, e^2, e^3 normalised, evaluated independently of the max shift
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in e.iter().map(|v| v / z).zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x);
        for (a, b) in g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let i3 = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_val = t(&[3, 2], &[1.5, -2.0, 0.25, 4.0, -3.0, 7.0]);
        let a = g.constant(a_val.clone());
        let p = g.matmul(i3, a).unwrap();
        assert_eq!(g.value(p), &a_val);
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            NumericsError::ShapeMismatch { op, shapes } => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3, 4], 0.7));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_sum_gradient_and_accumulation() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn xlogx_handles_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 3], &[0.0, 0.5, 1.0]));
        let y = g.xlogx(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert_eq!(g.value(y).data()[2], 0.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().is_finite());
    }

    #[test]
    fn row_outer_layout() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[1, 3], &[3.0, 4.0, 5.0]));
        let o = g.row_outer(a, b).unwrap();
        assert_eq!(g.value(o).data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }
}
