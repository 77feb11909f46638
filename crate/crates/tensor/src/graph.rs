//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the nodes in reverse creation order, which is a valid reverse
//! topological order because inputs always precede their consumers.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Powf(Var, f64),
    Mean(Var, usize),
    SumAll(Var),
    MaskedFill(Var, Vec<bool>),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    SegmentSoftmax { logits: Var, segments: Vec<usize> },
    ScatterMatrix { values: Var, rows: Vec<usize>, cols: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(TensorError::NotMatrix {
            op,
            shape: t.shape().to_vec(),
        })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    /// A constant leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf not tied to a stored parameter; gradients are available via
    /// [`Gradients::wrt`] when `requires_grad` is set.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// A parameter read without gradient tracking.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        Ok(self.push_op(Tensor::matrix(n, m, out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        require_matrix("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `m + row` with the `1 × c` row broadcast over every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(row));
        require_matrix("add_row", tm)?;
        if !tr.is_matrix() || tr.rows() != 1 || tr.cols() != tm.cols() {
            return Err(mismatch("add_row", tm, tr));
        }
        let c = tm.cols();
        let mut out = tm.clone();
        for r in 0..tm.rows() {
            for (o, &b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        Ok(self.push_op(out, Op::AddRow(m, row), &[m, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        Ok(self.push_op(out, Op::Scale(a, factor), &[a]))
    }

    /// Multiplies every entry of `a` by the `1 × 1` tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(mismatch("scale_by", self.value(a), ts));
        }
        let factor = ts.data()[0];
        let out = self.value(a).map(|x| x * factor);
        Ok(self.push_op(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        Ok(self.push_op(out, Op::AddScalar(a), &[a]))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Concatenates rank-2 tensors along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        };
        if axis > 1 {
            return Err(TensorError::Invalid(format!("concat axis {axis} not in {{0, 1}}")));
        }
        let t0 = self.value(first);
        require_matrix("concat", t0)?;
        for &p in &parts[1..] {
            let tp = self.value(p);
            require_matrix("concat", tp)?;
            let ok = if axis == 0 {
                tp.cols() == t0.cols()
            } else {
                tp.rows() == t0.rows()
            };
            if !ok {
                return Err(mismatch("concat", t0, tp));
            }
        }
        let out = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
            let mut data = Vec::with_capacity(rows * t0.cols());
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(rows, t0.cols(), data)
        } else {
            let rows = t0.rows();
            let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(r));
                }
            }
            Tensor::matrix(rows, cols, data)
        };
        Ok(self.push_op(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("slice_cols", ta)?;
        if start >= end || end > ta.cols() {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: end,
                len: ta.cols(),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(ta.rows() * w);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(r)[start..end]);
        }
        let out = Tensor::matrix(ta.rows(), w, data);
        Ok(self.push_op(out, Op::SliceCols(a, start), &[a]))
    }

    /// Selects rows by index; repeated indices broadcast a row.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("gather_rows", ta)?;
        if indices.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no indices".into()));
        }
        let c = ta.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= ta.rows() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    len: ta.rows(),
                });
            }
            data.extend_from_slice(ta.row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), c, data);
        Ok(self.push_op(out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ta = self.value(a);
        if rows * cols != ta.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let out = Tensor::matrix(rows, cols, ta.data().to_vec());
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    /// Row-wise softmax. Entries equal to `-inf` get probability zero; a row
    /// that is entirely `-inf` yields all zeros.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("softmax_rows", ta)?;
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            let row = out.row_slice_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        Ok(self.push_op(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("log_softmax_rows", ta)?;
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            let row = out.row_slice_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push_op(out, Op::LogSoftmaxRows(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        Ok(self.push_op(out, Op::Relu(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        Ok(self.push_op(out, Op::Tanh(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        Ok(self.push_op(out, Op::Sigmoid(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        Ok(self.push_op(out, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        Ok(self.push_op(out, Op::Log(a), &[a]))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        Ok(self.push_op(out, Op::Softplus(a), &[a]))
    }

    /// Elementwise power; inputs must be non-negative when `p` is fractional.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.powf(p));
        Ok(self.push_op(out, Op::Powf(a, p), &[a]))
    }

    /// Mean over `axis`: 0 collapses rows (`1 × c`), 1 collapses columns (`r × 1`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("mean", ta)?;
        let (r, c) = (ta.rows(), ta.cols());
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (o, &x) in acc.iter_mut().zip(ta.row_slice(i)) {
                        *o += x;
                    }
                }
                acc.iter_mut().for_each(|x| *x /= r as f64);
                Tensor::matrix(1, c, acc)
            }
            1 => {
                let data = (0..r)
                    .map(|i| ta.row_slice(i).iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor::matrix(r, 1, data)
            }
            _ => {
                return Err(TensorError::Invalid(format!("mean axis {axis} not in {{0, 1}}")));
            }
        };
        Ok(self.push_op(out, Op::Mean(a, axis), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.push_op(out, Op::SumAll(a), &[a]))
    }

    /// Replaces entries where `mask` is true with `fill`. Masked entries get zero gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = ta.clone();
        for (x, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *x = fill;
            }
        }
        Ok(self.push_op(out, Op::MaskedFill(a, mask.to_vec()), &[a]))
    }

    /// Per-row standardisation to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("layer_norm", ta)?;
        let c = ta.cols() as f64;
        let mut out = ta.clone();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for r in 0..ta.rows() {
            let row = out.row_slice_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        Ok(self.push_op(out, Op::LayerNorm { input: a, inv_std }, &[a]))
    }

    /// Softmax over groups of entries of an `e × 1` column; `segments[i]`
    /// names the group of entry `i`.
    pub fn segment_softmax(&mut self, logits: Var, segments: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.numel() != segments.len() || tl.cols() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                lhs: tl.shape().to_vec(),
                rhs: vec![segments.len(), 1],
            });
        }
        let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (&s, &x) in segments.iter().zip(tl.data()) {
            max[s] = max[s].max(x);
        }
        let mut total = vec![0.0; n_seg];
        let mut data: Vec<f64> = segments
            .iter()
            .zip(tl.data())
            .map(|(&s, &x)| {
                let e = (x - max[s]).exp();
                total[s] += e;
                e
            })
            .collect();
        for (x, &s) in data.iter_mut().zip(segments) {
            *x /= total[s];
        }
        let out = Tensor::matrix(segments.len(), 1, data);
        Ok(self.push_op(
            out,
            Op::SegmentSoftmax {
                logits,
                segments: segments.to_vec(),
            },
            &[logits],
        ))
    }

    /// Builds a dense `rows × cols` matrix from an `e × 1` column, summing
    /// values that land on the same cell.
    pub fn scatter_matrix(
        &mut self,
        values: Var,
        rows: &[usize],
        cols: &[usize],
        shape: (usize, usize),
    ) -> Result<Var> {
        let tv = self.value(values);
        if tv.numel() != rows.len() || rows.len() != cols.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_matrix",
                lhs: tv.shape().to_vec(),
                rhs: vec![rows.len(), cols.len()],
            });
        }
        let mut out = Tensor::zeros(shape.0, shape.1);
        for ((&r, &c), &v) in rows.iter().zip(cols).zip(tv.data()) {
            if r >= shape.0 || c >= shape.1 {
                return Err(TensorError::IndexOutOfBounds {
                    op: "scatter_matrix",
                    index: r.max(c),
                    len: shape.0.min(shape.1),
                });
            }
            let cur = out.get(r, c);
            out.set(r, c, cur + v);
        }
        Ok(self.push_op(
            out,
            Op::ScatterMatrix {
                values,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            &[values],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut BTreeMap<ParamId, Tensor>,
    ) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match params.get_mut(id) {
                Some(acc) => acc.add_scaled(g, 1.0),
                None => {
                    params.insert(*id, g.clone());
                }
            },
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_nt_into(g.data(), tb.data(), &mut da, n, m, k);
                    self.accumulate(grads, *a, Tensor::matrix(n, k, da));
                }
                if self.needs_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_tn_into(ta.data(), g.data(), &mut db, n, k, m);
                    self.accumulate(grads, *b, Tensor::matrix(k, m, db));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, zip_map(g, tb, |x, y| x * y));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, zip_map(g, ta, |x, y| x * y));
                }
            }
            Op::AddRow(m, row) => {
                self.accumulate(grads, *m, g.clone());
                if self.needs_grad(*row) {
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (o, &x) in acc.iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::matrix(1, c, acc));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s).data()[0];
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * factor));
                }
                if self.needs_grad(*s) {
                    let ta = self.value(*a);
                    let d: f64 = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, vec![d]).expect("scalar"));
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    if *axis == 0 {
                        let len = tp.numel();
                        if self.needs_grad(p) {
                            let data = g.data()[offset..offset + len].to_vec();
                            self.accumulate(grads, p, Tensor::matrix(tp.rows(), tp.cols(), data));
                        }
                        offset += len;
                    } else {
                        let w = tp.cols();
                        if self.needs_grad(p) {
                            let mut data = Vec::with_capacity(tp.numel());
                            for r in 0..g.rows() {
                                data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                            }
                            self.accumulate(grads, p, Tensor::matrix(tp.rows(), w, data));
                        }
                        offset += w;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                let w = g.cols();
                for r in 0..g.rows() {
                    d.row_slice_mut(r)[*start..*start + w].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, indices) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (o, &x) in d.row_slice_mut(i).iter_mut().zip(g.row_slice(k)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                let d = Tensor::new(ta.shape().to_vec(), g.data().to_vec()).expect("reshape grad");
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let dot: f64 = yr.iter().zip(g.row_slice(r)).map(|(p, q)| p * q).sum();
                    for (o, &p) in d.row_slice_mut(r).iter_mut().zip(yr) {
                        *o = p * (*o - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let total: f64 = g.row_slice(r).iter().sum();
                    for (o, &ly) in d.row_slice_mut(r).iter_mut().zip(y.row_slice(r)) {
                        *o -= ly.exp() * total;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |q, x| if x > 0.0 { q } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(g, y, |q, t| q * (1.0 - t * t))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(g, y, |q, s| q * s * (1.0 - s))),
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, y, |q, e| q * e)),
            Op::Log(a) => self.accumulate(grads, *a, zip_map(g, self.value(*a), |q, x| q / x)),
            Op::Softplus(a) => {
                self.accumulate(grads, *a, zip_map(g, self.value(*a), |q, x| q * sigmoid(x)))
            }
            Op::Powf(a, p) => {
                let d = zip_map(g, self.value(*a), |q, x| {
                    if x == 0.0 && *p >= 1.0 {
                        if *p == 1.0 {
                            q
                        } else {
                            0.0
                        }
                    } else {
                        q * p * x.powf(p - 1.0)
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a, axis) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut d = Tensor::zeros(r, c);
                if *axis == 0 {
                    for i in 0..r {
                        for (o, &x) in d.row_slice_mut(i).iter_mut().zip(g.data()) {
                            *o = x / r as f64;
                        }
                    }
                } else {
                    for i in 0..r {
                        let v = g.data()[i] / c as f64;
                        d.row_slice_mut(i).iter_mut().for_each(|o| *o = v);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                let v = g.data()[0];
                let d = Tensor::new(ta.shape().to_vec(), vec![v; ta.numel()]).expect("sum grad");
                self.accumulate(grads, *a, d);
            }
            Op::MaskedFill(a, mask) => {
                let mut d = g.clone();
                for (o, &m) in d.data_mut().iter_mut().zip(mask) {
                    if m {
                        *o = 0.0;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { input, inv_std } => {
                let c = y.cols() as f64;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((o, &gy), &yy) in d.row_slice_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gy - mean_g - yy * mean_gy);
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::SegmentSoftmax { logits, segments } => {
                let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg];
                for ((&s, &p), &q) in segments.iter().zip(y.data()).zip(g.data()) {
                    dot[s] += p * q;
                }
                let data = segments
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&s, &p), &q)| p * (q - dot[s]))
                    .collect();
                self.accumulate(grads, *logits, Tensor::matrix(segments.len(), 1, data));
            }
            Op::ScatterMatrix { values, rows, cols } => {
                let data = rows.iter().zip(cols).map(|(&r, &c)| g.get(r, c)).collect();
                let tv = self.value(*values);
                let d = Tensor::new(tv.shape().to_vec(), data).expect("scatter grad");
                self.accumulate(grads, *values, d);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_scaled(&d, 1.0),
            slot @ None => *slot = Some(d),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any node that required gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Accumulated gradient for a parameter, `None` when it did not take part.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn param_or_zeros(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.params.get(&id).cloned().unwrap_or_else(|| {
            let p = store.get(id);
            Tensor::new(p.shape().to_vec(), vec![0.0; p.numel()]).expect("zeros")
        })
    }

    /// One gradient per stored parameter; non-participating parameters get zeros.
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        store.ids().map(|id| self.param_or_zeros(store, id)).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params.iter().map(|(&id, t)| (id, t))
    }
}
