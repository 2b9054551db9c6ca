//! Reverse-mode differentiation over a linear tape.
//!
//! Ops are evaluated eagerly as they are recorded, so recording *is* the
//! forward pass. `backward` walks the tape once in reverse index order, which
//! is a valid reverse topological order because every node only refers to
//! earlier nodes.

use std::borrow::Cow;

use crate::tensor::{
    self, gelu, gelu_grad, layer_norm_rows, log_softmax_in_place, matmul_at_into, matmul_bt_into,
    matmul_into, softmax_in_place, Precision, Tensor, TensorError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Gelu,
    Exp,
    Log,
    Square,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Map(Var, Unary),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    DotConst {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    precision: Precision,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new(Precision::F64)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'a> Tape<'a> {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::with_capacity(512),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, rg: bool) -> Var {
        self.precision.round_slice(&mut data);
        let t = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(Cow::Owned(t), op, rg)
    }

    /// Differentiable leaf borrowing its storage.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul_bt")?;
        let (n, k2) = tb.dims2("matmul_bt")?;
        if k != k2 {
            return Err(mismatch("matmul_bt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ta.data(), tb.data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(vec![m, n], out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(shape, out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (m, n) = ta.dims2("add_row")?;
        if tb.numel() != n {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut out = ta.data().to_vec();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push_owned(shape, out, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(shape, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push_owned(shape, out, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(mismatch("add_const", ta, c));
        }
        let out = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push_owned(shape, out, Op::AddConst(a), rg))
    }

    fn map(&mut self, a: Var, kind: Unary) -> Var {
        let ta = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => gelu,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Square => |x| x * x,
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
        };
        let out = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push_owned(shape, out, Op::Map(a, kind), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Unary::Gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Unary::Log)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Unary::Square)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Unary::Sigmoid)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for `j > i`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (m, n) = ta.dims2("softmax")?;
        let mut out = ta.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            if causal {
                let keep = (r + 1).min(n);
                softmax_in_place(&mut row[..keep]);
                row[keep..].iter_mut().for_each(|v| *v = 0.0);
            } else {
                softmax_in_place(row);
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push_owned(shape, out, Op::Softmax(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (m, n) = ta.dims2("log_softmax")?;
        let mut out = ta.data().to_vec();
        for r in 0..m {
            log_softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push_owned(shape, out, Op::LogSoftmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (m, n) = tx.dims2("layer_norm")?;
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != n || tb.numel() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        layer_norm_rows(
            tx.data(),
            m,
            n,
            tg.data(),
            tb.data(),
            &mut out,
            &mut xhat,
            &mut inv_std,
        );
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push_owned(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup: `out[i] = table[rows[i]]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (v, d) = tt.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= v {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    extent: v,
                });
            }
            out.extend_from_slice(&tt.data()[r * d..(r + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push_owned(
            vec![rows.len(), d],
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (m, n) = tx.dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&tx.data()[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push_owned(vec![m, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        let (m, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = t.dims2("concat_cols")?;
            if pm != m {
                return Err(mismatch("concat_cols", first, t));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p).data();
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&t[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push_owned(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push_owned(vec![], vec![s], Op::Sum(x), rg)
    }

    /// `Σ xᵢ·wᵢ` against a constant weight tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.shape() != weights.shape() {
            return Err(mismatch("dot_const", tx, weights));
        }
        let s = tensor::dot(tx.data(), weights.data());
        let rg = self.rg(x);
        Ok(self.push_owned(
            vec![],
            vec![s],
            Op::DotConst {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn backward(&self, output: Var) -> Result<Gradients, TensorError> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(TensorError::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2("matmul").unwrap();
                let n = tb.dims2("matmul").unwrap().1;
                if rg(*a) {
                    matmul_bt_into(g, tb.data(), m, n, k, acc(grads, *a, m * k));
                }
                if rg(*b) {
                    matmul_at_into(ta.data(), g, m, k, n, acc(grads, *b, k * n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2("matmul_bt").unwrap();
                let n = tb.dims2("matmul_bt").unwrap().0;
                if rg(*a) {
                    matmul_into(g, tb.data(), m, n, k, acc(grads, *a, m * k));
                }
                if rg(*b) {
                    matmul_at_into(g, ta.data(), m, n, k, acc(grads, *b, n * k));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        let dst = acc(grads, v, g.len());
                        dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                let n = val(*bias).numel();
                if rg(*a) {
                    let dst = acc(grads, *a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if rg(*bias) {
                    let dst = acc(grads, *bias, n);
                    for row in g.chunks(n) {
                        dst.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if rg(*a) {
                    let dst = acc(grads, *a, g.len());
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(tb.data()) {
                        *d += x * y;
                    }
                }
                if rg(*b) {
                    let dst = acc(grads, *b, g.len());
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(ta.data()) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    let dst = acc(grads, *a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::AddConst(a) => {
                if rg(*a) {
                    let dst = acc(grads, *a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Map(a, kind) => {
                if rg(*a) {
                    let x = val(*a).data();
                    let y = node.value.data();
                    let dst = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        let dydx = match kind {
                            Unary::Gelu => gelu_grad(x[i]),
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Square => 2.0 * x[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        };
                        dst[i] += g[i] * dydx;
                    }
                }
            }
            Op::Softmax(a) => {
                if rg(*a) {
                    let y = &node.value;
                    let (m, n) = y.dims2("softmax").unwrap();
                    let dst = acc(grads, *a, m * n);
                    for r in 0..m {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = tensor::dot(yr, gr);
                        for c in 0..n {
                            dst[r * n + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if rg(*a) {
                    let y = &node.value;
                    let (m, n) = y.dims2("log_softmax").unwrap();
                    let dst = acc(grads, *a, m * n);
                    for r in 0..m {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s: f64 = gr.iter().sum();
                        for c in 0..n {
                            dst[r * n + c] += gr[c] - yr[c].exp() * s;
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
                let (m, n) = val(*x).dims2("layer_norm").unwrap();
                let gv = val(*gain).data();
                if rg(*gain) {
                    let dst = acc(grads, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            dst[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if rg(*bias) {
                    let dst = acc(grads, *bias, n);
                    for r in 0..m {
                        for c in 0..n {
                            dst[c] += g[r * n + c];
                        }
                    }
                }
                if rg(*x) {
                    let dst = acc(grads, *x, m * n);
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            dxhat[c] = g[r * n + c] * gv[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xh[c];
                        }
                        let k = inv_std[r] / nf;
                        for c in 0..n {
                            dst[r * n + c] += k * (nf * dxhat[c] - s1 - xh[c] * s2);
                        }
                    }
                }
            }
            Op::Gather { table, rows } => {
                if rg(*table) {
                    let t = val(*table);
                    let d = t.dims2("gather_rows").unwrap().1;
                    let dst = acc(grads, *table, t.numel());
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            dst[r * d + c] += g[i * d + c];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if rg(*x) {
                    let (m, n) = val(*x).dims2("slice_cols").unwrap();
                    let len = g.len() / m.max(1);
                    let dst = acc(grads, *x, m * n);
                    for r in 0..m {
                        for c in 0..len {
                            dst[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2("concat_cols").unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).dims2("concat_cols").unwrap().1;
                    if rg(p) {
                        let dst = acc(grads, p, m * w);
                        for r in 0..m {
                            for c in 0..w {
                                dst[r * w + c] += g[r * n + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    let len = val(*x).numel();
                    let dst = acc(grads, *x, len);
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::DotConst { x, weights } => {
                if rg(*x) {
                    let dst = acc(grads, *x, weights.len());
                    dst.iter_mut()
                        .zip(weights)
                        .for_each(|(d, w)| *d += g[0] * w);
                }
            }
        }
    }
}

/// Result of a backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when nothing flowed into it.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros for detached nodes.
    pub fn get(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        let shape = tape.value(v).shape();
        match self.raw(v) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient matches value"),
            None => Tensor::zeros(shape),
        }
    }
}
