//! The computation tape.
//!
//! Nodes are appended in execution order, so the index order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::kernels::{self, AttentionCache};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{contract, Result, Tensor, TensorError};

const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Sqrt,
    Square,
    Clamp(f64, f64),
    Scale(f64),
    AddScalar,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    InstanceNorm(Var, Vec<f64>),
    NormalizeRows(Var, Vec<f64>),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        taps: usize,
        dilation: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Embedding(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        cache: AttentionCache,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bound: Vec<Option<Var>>,
}

fn shape_err<T>(op: &'static str, a: &Tensor, b: &Tensor) -> Result<T> {
    Err(TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
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

    /// Drops every recorded node, gradient and parameter binding.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.bound.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter onto this tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), store.trainable(id));
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter bound on this tape, indexed by parameter id.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        (0..store.len())
            .map(|i| {
                self.bound
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.grad(v).cloned())
            })
            .collect()
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(op, ta, tb);
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Div(a, b), g))
    }

    fn row_broadcast(&mut self, op: &'static str, x: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (r, c) = tx.dims2();
        if tr.len() != c {
            return shape_err(op, tx, tr);
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(tx.row(i).iter().zip(tr.data()).map(|(&a, &b)| f(a, b)));
        }
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// `x[r×c] + row[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        let g = self.needs(x) || self.needs(row);
        Ok(self.push(t, Op::AddRow(x, row), g))
    }

    /// `x[r×c] ⊙ row[c]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        let g = self.needs(x) || self.needs(row);
        Ok(self.push(t, Op::MulRow(x, row), g))
    }

    /// `x[r×c] ⊙ col[r]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        let (r, c) = tx.dims2();
        if tc.len() != r {
            return shape_err("mul_col", tx, tc);
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = tc.data()[i];
            data.extend(tx.row(i).iter().map(|&a| a * s));
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let g = self.needs(x) || self.needs(col);
        Ok(self.push(t, Op::MulCol(x, col), g))
    }

    fn unary(&mut self, x: Var, u: Unary, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        let g = self.needs(x);
        self.push(t, Op::Unary(x, u), g)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log, f64::ln)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh, f64::tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs, f64::abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt, f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square, |v| v * v)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi), move |v| v.clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c), move |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar, move |v| v + c)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return shape_err("matmul", ta, tb);
        }
        let (m, k) = ta.dims2();
        let n = tb.cols();
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return contract("transpose", format!("expected rank 2, got {:?}", tx.shape()));
        }
        let t = tx.transpose2();
        let g = self.needs(x);
        Ok(self.push(t, Op::Transpose(x), g))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let g = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), g))
    }

    // ---- normalisation ----------------------------------------------------

    /// Softmax along `axis` of a rank-1 or rank-2 tensor, max-stabilised.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let axis = resolve_axis("softmax", tx, axis)?;
        let (r, c) = tx.dims2();
        let mut data = tx.data().to_vec();
        for_each_lane(r, c, axis, |idx| {
            let max = idx.clone().map(|i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in idx.clone() {
                data[i] = (data[i] - max).exp();
                total += data[i];
            }
            for i in idx {
                data[i] /= total;
            }
        });
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let g = self.needs(x);
        Ok(self.push(t, Op::Softmax(x, axis), g))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let g = self.needs(x);
        Ok(self.push(t, Op::LogSoftmax(x), g))
    }

    /// Normalises every row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let (data, inv) = standardize(tx.data(), r, c, 1);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let g = self.needs(x);
        Ok(self.push(t, Op::LayerNorm(x, inv), g))
    }

    /// Normalises every column over time (rows), i.e. instance normalisation
    /// of a `T×C` sequence without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let (data, inv) = standardize(tx.data(), r, c, 0);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let g = self.needs(x);
        Ok(self.push(t, Op::InstanceNorm(x, inv), g))
    }

    /// Scales every row to unit Euclidean norm. A zero row is a contract error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row(i);
            let n = kernels::dot(row, row).sqrt();
            if n == 0.0 {
                return contract("normalize_rows", format!("row {i} is the zero vector"));
            }
            data.extend(row.iter().map(|v| v / n));
            norms.push(n);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let g = self.needs(x);
        Ok(self.push(t, Op::NormalizeRows(x, norms), g))
    }

    // ---- convolution & attention -----------------------------------------

    /// Length-preserving dilated 1-D convolution over time with symmetric zero
    /// padding. `x: T×Cin`, `w: taps×Cin×Cout` (taps odd), `b: Cout`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (t, cin) = tx.dims2();
        let [taps, wcin, cout] = *tw.shape() else {
            return shape_err("conv1d", tx, tw);
        };
        if wcin != cin || taps % 2 == 0 || dilation == 0 {
            return shape_err("conv1d", tx, tw);
        }
        let mut out = vec![0.0; t * cout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != cout {
                return shape_err("conv1d", tw, tb);
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(tb.data());
            }
        }
        kernels::conv1d_forward(tx.data(), tw.data(), t, cin, cout, taps, dilation, &mut out);
        let val = Tensor::new(vec![t, cout], out)?;
        let g = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            val,
            Op::Conv1d {
                x,
                w,
                b,
                taps,
                dilation,
            },
            g,
        ))
    }

    /// Single-head scaled dot-product attention where query `i` only sees keys
    /// inside its length-`window` local window (see [`attention_window`]).
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, window: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, dk) = tq.dims2();
        if tk.dims2() != (t, dk) {
            return shape_err("local_attention", tq, tk);
        }
        if tv.rows() != t {
            return shape_err("local_attention", tq, tv);
        }
        if window == 0 {
            return contract("local_attention", "window must be at least 1");
        }
        let dv = tv.cols();
        let mut out = vec![0.0; t * dv];
        let cache = kernels::local_attention_forward(tq.data(), tk.data(), tv.data(), t, dk, dv, window, &mut out);
        let val = Tensor::new(vec![t, dv], out)?;
        let g = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(val, Op::Attention { q, k, v, cache }, g))
    }

    /// Dense `T×T` attention weights recorded by a [`Tape::local_attention`] node.
    pub fn attention_weights(&self, node: Var) -> Option<Tensor> {
        let Op::Attention { cache, .. } = &self.nodes[node.0].op else {
            return None;
        };
        let t = cache.starts.len();
        let mut dense = Tensor::zeros(&[t, t]);
        for (i, (s, w)) in cache.starts.iter().zip(&cache.weights).enumerate() {
            dense.data_mut()[i * t + s..i * t + s + w.len()].copy_from_slice(w);
        }
        Some(dense)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let g = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.len() as f64;
        let g = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), g)
    }

    /// Sum over `axis` of a rank-2 tensor; the reduced axis is kept with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let axis = resolve_axis("sum_axis", tx, axis)?;
        let (r, c) = tx.dims2();
        let t = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                kernels::axpy(1.0, tx.row(i), &mut out);
            }
            Tensor::new(vec![1, c], out)?
        } else {
            let out = (0..r).map(|i| tx.row(i).iter().sum()).collect();
            Tensor::new(vec![r, 1], out)?
        };
        let g = self.needs(x);
        Ok(self.push(t, Op::SumAxis(x, axis), g))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let axis = resolve_axis("mean_axis", tx, axis)?;
        let (r, c) = tx.dims2();
        let n = if axis == 0 { r } else { c };
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // ---- structural -------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_cols", "no inputs");
        };
        let r = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return shape_err("concat_cols", self.value(first), self.value(p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_rows", "no inputs");
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != c {
                return shape_err("concat_rows", self.value(first), tp);
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        if start > end || end > r {
            return contract("slice_rows", format!("range {start}..{end} out of 0..{r}"));
        }
        let t = Tensor::new(vec![end - start, c], tx.data()[start * c..end * c].to_vec())?;
        let g = self.needs(x);
        Ok(self.push(t, Op::SliceRows(x, start), g))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        if start > end || end > c {
            return contract("slice_cols", format!("range {start}..{end} out of 0..{c}"));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..end]);
        }
        let t = Tensor::new(vec![r, end - start], data)?;
        let g = self.needs(x);
        Ok(self.push(t, Op::SliceCols(x, start), g))
    }

    /// Looks up rows of `table[V×D]`; result is `ids.len()×D`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return contract("embedding", format!("id {id} out of vocabulary of {v}"));
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let g = self.needs(table);
        Ok(self.push(t, Op::Embedding(table, ids.to_vec()), g))
    }

    /// Picks column `cols[i]` from row `i`; result is `R×1`.
    pub fn gather(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        if cols.len() != r {
            return contract("gather", format!("{} indices for {r} rows", cols.len()));
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return contract("gather", format!("column {j} out of 0..{c}"));
            }
            data.push(tx.data()[i * c + j]);
        }
        let t = Tensor::new(vec![r, 1], data)?;
        let g = self.needs(x);
        Ok(self.push(t, Op::Gather(x, cols.to_vec()), g))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of nodes that do not
    /// influence the loss stay absent.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return contract("backward", format!("loss must be scalar, got shape {:?}", lv.shape()));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            backprop_node(&self.nodes, i, g, lo);
        }
        Ok(())
    }
}

/// The `[start, end)` key window for query `i` of a length-`len` sequence.
pub fn attention_window(i: usize, window: usize, len: usize) -> (usize, usize) {
    kernels::window_bounds(i, window, len)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn resolve_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<usize> {
    match (t.rank(), axis) {
        (1, 0) => Ok(1),
        (2, 0 | 1) => Ok(axis),
        _ => contract(op, format!("axis {axis} invalid for shape {:?}", t.shape())),
    }
}

/// Calls `f` with the flat indices of every lane along `axis` of an `r×c` array.
fn for_each_lane(r: usize, c: usize, axis: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    if axis == 1 {
        for i in 0..r {
            f((i * c..(i + 1) * c).step_by(1));
        }
    } else {
        for j in 0..c {
            f((j..r * c).step_by(c));
        }
    }
}

/// Zero-mean unit-variance along `axis`; returns data and `1/std` per lane.
fn standardize(x: &[f64], r: usize, c: usize, axis: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = x.to_vec();
    let mut inv = Vec::new();
    for_each_lane(r, c, axis, |idx| {
        let n = idx.len() as f64;
        let mean = idx.clone().map(|i| out[i]).sum::<f64>() / n;
        let var = idx.clone().map(|i| (out[i] - mean).powi(2)).sum::<f64>() / n;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        for i in idx {
            out[i] = (out[i] - mean) * s;
        }
        inv.push(s);
    });
    (out, inv)
}

/// Accumulator slot for `v`, zero-initialised on first use.
fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
        .data_mut()
}

fn backprop_node(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[i];
    let gd = g.data();
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &(v, s) in &[(*a, 1.0), (*b, 1.0)] {
                if needs(v) {
                    kernels::axpy(s, gd, slot(grads, nodes, v));
                }
            }
        }
        Op::Sub(a, b) => {
            for &(v, s) in &[(*a, 1.0), (*b, -1.0)] {
                if needs(v) {
                    kernels::axpy(s, gd, slot(grads, nodes, v));
                }
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let other = val(*b).data();
                let dst = slot(grads, nodes, *a);
                for ((d, &gv), &o) in dst.iter_mut().zip(gd).zip(other) {
                    *d += gv * o;
                }
            }
            if needs(*b) {
                let other = val(*a).data();
                let dst = slot(grads, nodes, *b);
                for ((d, &gv), &o) in dst.iter_mut().zip(gd).zip(other) {
                    *d += gv * o;
                }
            }
        }
        Op::Div(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                let dst = slot(grads, nodes, *a);
                for ((d, &gv), &y) in dst.iter_mut().zip(gd).zip(bd) {
                    *d += gv / y;
                }
            }
            if needs(*b) {
                let dst = slot(grads, nodes, *b);
                for (((d, &gv), &x), &y) in dst.iter_mut().zip(gd).zip(ad).zip(bd) {
                    *d -= gv * x / (y * y);
                }
            }
        }
        Op::AddRow(x, row) => {
            let c = val(*row).len();
            if needs(*x) {
                kernels::axpy(1.0, gd, slot(grads, nodes, *x));
            }
            if needs(*row) {
                let dst = slot(grads, nodes, *row);
                for gr in gd.chunks(c) {
                    kernels::axpy(1.0, gr, dst);
                }
            }
        }
        Op::MulRow(x, row) => {
            let rd = val(*row).data();
            let c = rd.len();
            if needs(*x) {
                let dst = slot(grads, nodes, *x);
                for (dr, gr) in dst.chunks_mut(c).zip(gd.chunks(c)) {
                    for ((d, &gv), &s) in dr.iter_mut().zip(gr).zip(rd) {
                        *d += gv * s;
                    }
                }
            }
            if needs(*row) {
                let xd = val(*x).data();
                let dst = slot(grads, nodes, *row);
                for (xr, gr) in xd.chunks(c).zip(gd.chunks(c)) {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(gr).zip(xr) {
                        *d += gv * xv;
                    }
                }
            }
        }
        Op::MulCol(x, col) => {
            let cd = val(*col).data();
            let c = val(*x).cols();
            if needs(*x) {
                let dst = slot(grads, nodes, *x);
                for ((dr, gr), &s) in dst.chunks_mut(c).zip(gd.chunks(c)).zip(cd) {
                    kernels::axpy(s, gr, dr);
                }
            }
            if needs(*col) {
                let xd = val(*x).data();
                let dst = slot(grads, nodes, *col);
                for ((d, xr), gr) in dst.iter_mut().zip(xd.chunks(c)).zip(gd.chunks(c)) {
                    *d += kernels::dot(xr, gr);
                }
            }
        }
        Op::Unary(x, u) => {
            if !needs(*x) {
                return;
            }
            let xd = val(*x).data();
            let yd = node.value.data();
            let dst = slot(grads, nodes, *x);
            for (k, d) in dst.iter_mut().enumerate() {
                let (xv, yv, gv) = (xd[k], yd[k], gd[k]);
                *d += gv
                    * match *u {
                        Unary::Exp => yv,
                        Unary::Log => 1.0 / xv,
                        Unary::Relu => f64::from(u8::from(xv > 0.0)),
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Tanh => 1.0 - yv * yv,
                        Unary::Abs => xv.signum() * f64::from(u8::from(xv != 0.0)),
                        Unary::Sqrt => 0.5 / yv,
                        Unary::Square => 2.0 * xv,
                        Unary::Clamp(lo, hi) => f64::from(u8::from(xv > lo && xv < hi)),
                        Unary::Scale(c) => c,
                        Unary::AddScalar => 1.0,
                    };
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = ta.dims2();
            let n = tb.cols();
            if needs(*a) {
                kernels::matmul_nt_acc(gd, tb.data(), m, k, n, slot(grads, nodes, *a));
            }
            if needs(*b) {
                kernels::matmul_tn_acc(ta.data(), gd, m, k, n, slot(grads, nodes, *b));
            }
        }
        Op::Transpose(x) => {
            if needs(*x) {
                let (r, c) = node.value.dims2();
                let mut tmp = vec![0.0; r * c];
                kernels::transpose(gd, r, c, &mut tmp);
                kernels::axpy(1.0, &tmp, slot(grads, nodes, *x));
            }
        }
        Op::Reshape(x) => {
            if needs(*x) {
                kernels::axpy(1.0, gd, slot(grads, nodes, *x));
            }
        }
        Op::Softmax(x, axis) => {
            if !needs(*x) {
                return;
            }
            let yd = node.value.data();
            let (r, c) = node.value.dims2();
            let dst = slot(grads, nodes, *x);
            for_each_lane(r, c, *axis, |idx| {
                let inner: f64 = idx.clone().map(|k| gd[k] * yd[k]).sum();
                for k in idx {
                    dst[k] += yd[k] * (gd[k] - inner);
                }
            });
        }
        Op::LogSoftmax(x) => {
            if !needs(*x) {
                return;
            }
            let yd = node.value.data();
            let c = node.value.cols();
            let dst = slot(grads, nodes, *x);
            for ((dr, gr), yr) in dst.chunks_mut(c).zip(gd.chunks(c)).zip(yd.chunks(c)) {
                let gsum: f64 = gr.iter().sum();
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d += gv - yv.exp() * gsum;
                }
            }
        }
        Op::LayerNorm(x, inv) | Op::InstanceNorm(x, inv) => {
            if !needs(*x) {
                return;
            }
            let axis = usize::from(matches!(node.op, Op::LayerNorm(..)));
            let yd = node.value.data();
            let (r, c) = node.value.dims2();
            let dst = slot(grads, nodes, *x);
            let mut lane = 0;
            for_each_lane(r, c, axis, |idx| {
                let n = idx.len() as f64;
                let gsum: f64 = idx.clone().map(|k| gd[k]).sum();
                let gy: f64 = idx.clone().map(|k| gd[k] * yd[k]).sum();
                let s = inv[lane];
                for k in idx {
                    dst[k] += s * (gd[k] - gsum / n - yd[k] * gy / n);
                }
                lane += 1;
            });
        }
        Op::NormalizeRows(x, norms) => {
            if !needs(*x) {
                return;
            }
            let yd = node.value.data();
            let c = node.value.cols();
            let dst = slot(grads, nodes, *x);
            for (((dr, gr), yr), &n) in dst.chunks_mut(c).zip(gd.chunks(c)).zip(yd.chunks(c)).zip(norms) {
                let gy = kernels::dot(gr, yr);
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d += (gv - yv * gy) / n;
                }
            }
        }
        Op::Conv1d {
            x,
            w,
            b,
            taps,
            dilation,
        } => {
            let (tx, tw) = (val(*x), val(*w));
            let (t, cin) = tx.dims2();
            let cout = node.value.cols();
            if let Some(b) = b.filter(|b| needs(*b)) {
                let dst = slot(grads, nodes, b);
                for gr in gd.chunks(cout) {
                    kernels::axpy(1.0, gr, dst);
                }
            }
            // dx and dw may both be needed; borrow their slots one at a time.
            if needs(*x) {
                let dx = slot(grads, nodes, *x);
                kernels::conv1d_backward(tx.data(), tw.data(), gd, t, cin, cout, *taps, *dilation, Some(dx), None);
            }
            if needs(*w) {
                let dw = slot(grads, nodes, *w);
                kernels::conv1d_backward(tx.data(), tw.data(), gd, t, cin, cout, *taps, *dilation, None, Some(dw));
            }
        }
        Op::SumAll(x) | Op::MeanAll(x) => {
            if !needs(*x) {
                return;
            }
            let n = val(*x).len();
            let s = if matches!(node.op, Op::MeanAll(_)) {
                gd[0] / n as f64
            } else {
                gd[0]
            };
            slot(grads, nodes, *x).iter_mut().for_each(|d| *d += s);
        }
        Op::SumAxis(x, axis) => {
            if !needs(*x) {
                return;
            }
            let (r, c) = val(*x).dims2();
            let dst = slot(grads, nodes, *x);
            if *axis == 0 {
                for dr in dst.chunks_mut(c).take(r) {
                    kernels::axpy(1.0, gd, dr);
                }
            } else {
                for (dr, &gv) in dst.chunks_mut(c).zip(gd) {
                    dr.iter_mut().for_each(|d| *d += gv);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut off = 0;
            for &p in parts {
                let c = val(p).cols();
                if needs(p) {
                    let dst = slot(grads, nodes, p);
                    for (dr, gr) in dst.chunks_mut(c).zip(gd.chunks(total)) {
                        kernels::axpy(1.0, &gr[off..off + c], dr);
                    }
                }
                off += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                if needs(p) {
                    kernels::axpy(1.0, &gd[off..off + n], slot(grads, nodes, p));
                }
                off += n;
            }
        }
        Op::SliceRows(x, start) => {
            if needs(*x) {
                let c = val(*x).cols();
                let dst = slot(grads, nodes, *x);
                kernels::axpy(1.0, gd, &mut dst[start * c..start * c + gd.len()]);
            }
        }
        Op::SliceCols(x, start) => {
            if needs(*x) {
                let c = val(*x).cols();
                let w = node.value.cols();
                let dst = slot(grads, nodes, *x);
                for (dr, gr) in dst.chunks_mut(c).zip(gd.chunks(w.max(1))) {
                    kernels::axpy(1.0, gr, &mut dr[*start..start + w]);
                }
            }
        }
        Op::Embedding(table, ids) => {
            if needs(*table) {
                let d = val(*table).cols();
                let dst = slot(grads, nodes, *table);
                for (gr, &id) in gd.chunks(d).zip(ids) {
                    kernels::axpy(1.0, gr, &mut dst[id * d..(id + 1) * d]);
                }
            }
        }
        Op::Gather(x, cols) => {
            if needs(*x) {
                let c = val(*x).cols();
                let dst = slot(grads, nodes, *x);
                for (r, (&j, &gv)) in cols.iter().zip(gd).enumerate() {
                    dst[r * c + j] += gv;
                }
            }
        }
        Op::Attention { q, k, v, cache } => {
            let (tq, tk, tv) = (val(*q), val(*k), val(*v));
            let (t, dk) = tq.dims2();
            let dv = tv.cols();
            let mut dq = vec![0.0; t * dk];
            let mut dkk = vec![0.0; t * dk];
            let mut dvv = vec![0.0; t * dv];
            kernels::local_attention_backward(
                tq.data(),
                tk.data(),
                tv.data(),
                cache,
                gd,
                t,
                dk,
                dv,
                &mut dq,
                &mut dkk,
                &mut dvv,
            );
            for (var, d) in [(*q, dq), (*k, dkk), (*v, dvv)] {
                if needs(var) {
                    kernels::axpy(1.0, &d, slot(grads, nodes, var));
                }
            }
        }
    }
}
