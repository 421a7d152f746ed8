//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] is an append-only arena. Every operation evaluates eagerly and
//! records a node, so node ids are already a topological order. The backward
//! pass is itself written in terms of graph operations: the gradients it
//! returns are ordinary nodes, and a scalar function of them can be
//! differentiated again. This is what lets an outer objective be
//! differentiated through inner gradient steps.
//!
//! Shape mismatches are programming errors and panic with both shapes and the
//! operation name.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    SumTo(Var),
    BroadcastTo(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    /// `0.5 * sum(x^2)`
    HalfSumSq(Var),
    /// `order`-th derivative of GELU.
    Gelu(Var, u8),
    /// `order`-th derivative of ELU (alpha = 1).
    Elu(Var, u8),
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols { x: Var, start: usize },
    PadCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Arc<[usize]> },
    ScatterRows { x: Var, idx: Arc<[usize]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SumTo(..) => "sum_to",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Powf(..) => "powf",
            Op::HalfSumSq(..) => "half_sum_sq",
            Op::Gelu(..) => "gelu",
            Op::Elu(..) => "elu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }

    fn inputs(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                f(*a);
                f(*b);
            }
            Op::MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::SumTo(x)
            | Op::BroadcastTo(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Powf(x, _)
            | Op::HalfSumSq(x)
            | Op::Gelu(x, _)
            | Op::Elu(x, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::SliceCols { x, .. }
            | Op::PadCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. } => f(*x),
            Op::ConcatCols(xs) => xs.iter().copied().for_each(f),
        }
    }
}

struct Node<S: Real> {
    op: Op,
    value: Tensor<S>,
}

/// Gradients of a scalar with respect to a set of variables, as tensors.
#[derive(Clone, Debug)]
pub struct GradMap<S: Real = f64> {
    entries: Vec<(Var, Tensor<S>)>,
}

impl<S: Real> GradMap<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(k, _)| *k == v).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Var, Tensor<S>)> {
        self.entries.iter()
    }

    pub fn into_tensors(self) -> Vec<Tensor<S>> {
        self.entries.into_iter().map(|(_, t)| t).collect()
    }
}

pub struct Graph<S: Real = f64> {
    nodes: Vec<Node<S>>,
    gelu_memo: BTreeMap<(usize, u8), Var>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), gelu_memo: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<S>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Parameters, inputs and constants all enter the graph as leaves.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        assert_eq!(value.rank(), 2, "graph tensors are rank 2, got {:?}", value.shape());
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: S) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// The cached value of `root`. Evaluation already happened, in node order,
    /// when the graph was built.
    pub fn forward(&self, root: Var) -> &Tensor<S> {
        self.value(root)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// A new leaf holding a copy of `v`'s value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.leaf(t)
    }

    // ---- elementwise binary ops with 2-d broadcasting -------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y);
        self.push(Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary("sub", a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), t)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary("div", a, b, |x, y| x / y);
        self.push(Op::Div(a, b), t)
    }

    fn broadcast_binary(&self, op: &str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (ra, ca) = ta.dims();
        let (rb, cb) = tb.dims();
        let rows = broadcast_dim(ra, rb).unwrap_or_else(|| shape_panic(op, ta.shape(), tb.shape()));
        let cols = broadcast_dim(ca, cb).unwrap_or_else(|| shape_panic(op, ta.shape(), tb.shape()));
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(rows * cols);
        if ra == rb && ca == cb {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else if ra == rows && ca == cols {
            for r in 0..rows {
                let arow = &da[r * cols..(r + 1) * cols];
                let br = if rb == 1 { 0 } else { r };
                if cb == 1 {
                    let y = db[br];
                    out.extend(arow.iter().map(|&x| f(x, y)));
                } else {
                    let brow = &db[br * cb..(br + 1) * cb];
                    out.extend(arow.iter().zip(brow).map(|(&x, &y)| f(x, y)));
                }
            }
        } else {
            for r in 0..rows {
                for c in 0..cols {
                    let x = da[(if ra == 1 { 0 } else { r }) * ca + if ca == 1 { 0 } else { c }];
                    let y = db[(if rb == 1 { 0 } else { r }) * cb + if cb == 1 { 0 } else { c }];
                    out.push(f(x, y));
                }
            }
        }
        Tensor::from_vec(rows, cols, out)
    }

    // ---- unary ------------------------------------------------------------

    pub fn neg(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| -v);
        self.push(Op::Neg(x), t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        if c == 1.0 {
            return x;
        }
        let s = S::from_f64(c);
        let t = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, c), t)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(S::exp);
        self.push(Op::Exp(x), t)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x).map(S::ln);
        self.push(Op::Ln(x), t)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let ps = S::from_f64(p);
        let t = self.value(x).map(|v| v.powf(ps));
        self.push(Op::Powf(x, p), t)
    }

    /// `0.5 * sum(x^2)` as a `[1, 1]` scalar.
    pub fn half_sum_sq(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in self.value(x).data() {
            acc += v * v;
        }
        let t = Tensor::scalar(S::from_f64(0.5) * acc);
        self.push(Op::HalfSumSq(x), t)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    /// GELU in its exact form `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.gelu_n(x, 0)
    }

    fn gelu_n(&mut self, x: Var, order: u8) -> Var {
        if let Some(&v) = self.gelu_memo.get(&(x.0, order)) {
            return v;
        }
        let t = self.value(x).map(|v| gelu_derivative(v, order));
        let v = self.push(Op::Gelu(x, order), t);
        self.gelu_memo.insert((x.0, order), v);
        v
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.elu_n(x, 0)
    }

    fn elu_n(&mut self, x: Var, order: u8) -> Var {
        let t = self.value(x).map(|v| elu_derivative(v, order));
        self.push(Op::Elu(x, order), t)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        self.push(Op::Transpose(x), t)
    }

    // ---- matmul -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let t = {
            let va = self.value(a);
            let vb = self.value(b);
            let (ra, ca) = va.dims();
            let (rb, cb) = vb.dims();
            let (m, k, rsa, csa) = if ta { (ca, ra, 1, ca as isize) } else { (ra, ca, ca as isize, 1) };
            let (k2, n, rsb, csb) = if tb { (cb, rb, 1, cb as isize) } else { (rb, cb, cb as isize, 1) };
            if k != k2 {
                shape_panic(if ta || tb { "matmul_t" } else { "matmul" }, va.shape(), vb.shape());
            }
            let mut out = vec![S::ZERO; m * n];
            // SAFETY: extents and strides describe the contiguous buffers above.
            unsafe {
                S::gemm(
                    m,
                    k,
                    n,
                    S::ONE,
                    va.data().as_ptr(),
                    rsa,
                    csa,
                    vb.data().as_ptr(),
                    rsb,
                    csb,
                    S::ZERO,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            Tensor::from_vec(m, n, out)
        };
        self.push(Op::MatMul { a, b, ta, tb }, t)
    }

    // ---- reductions and broadcasts ------------------------------------------

    /// Sums `x` down to `[rows, cols]`; each target extent must equal the
    /// source extent or be 1.
    pub fn sum_to(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.dims(x);
        if (r, c) == (rows, cols) {
            return x;
        }
        if !((rows == r || rows == 1) && (cols == c || cols == 1)) {
            shape_panic("sum_to", self.value(x).shape(), &[rows, cols]);
        }
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; rows * cols];
        for i in 0..r {
            let oi = if rows == 1 { 0 } else { i };
            for j in 0..c {
                let oj = if cols == 1 { 0 } else { j };
                out[oi * cols + oj] += src[i * c + j];
            }
        }
        let t = Tensor::from_vec(rows, cols, out);
        self.push(Op::SumTo(x), t)
    }

    pub fn broadcast_to(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.dims(x);
        if (r, c) == (rows, cols) {
            return x;
        }
        if !((r == rows || r == 1) && (c == cols || c == 1)) {
            shape_panic("broadcast_to", self.value(x).shape(), &[rows, cols]);
        }
        let src = self.value(x);
        let t = Tensor::from_fn(rows, cols, |i, j| {
            src.at(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j })
        });
        self.push(Op::BroadcastTo(x), t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.sum_to(x, 1, 1)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise sum, `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let r = self.dims(x).0;
        self.sum_to(x, r, 1)
    }

    /// Column-wise sum, `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let c = self.dims(x).1;
        self.sum_to(x, 1, c)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let r = self.dims(x).0;
        let s = self.sum_rows(x);
        self.scale(s, 1.0 / r as f64)
    }

    // ---- softmax family -----------------------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = softmax_rows(self.value(x));
        self.push(Op::Softmax(x), t)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (r, c) = src.dims();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = src.row(i);
            let m = row.iter().copied().fold(row[0], S::max);
            let mut z = S::ZERO;
            for &v in row {
                z += (v - m).exp();
            }
            let lse = m + z.ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let t = Tensor::from_vec(r, c, out);
        self.push(Op::LogSoftmax(x), t)
    }

    // ---- structural -----------------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        if start + len > src.cols() || len == 0 {
            shape_panic("slice_cols", src.shape(), &[start, start + len]);
        }
        if start == 0 && len == src.cols() {
            return x;
        }
        let t = src.slice_cols(start, len);
        self.push(Op::SliceCols { x, start }, t)
    }

    /// Embeds `x` as columns `[start, start + cols(x))` of a zero `[rows, total]`.
    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Var {
        let src = self.value(x);
        let (r, c) = src.dims();
        if start + c > total {
            shape_panic("pad_cols", src.shape(), &[r, total]);
        }
        let t = Tensor::from_fn(r, total, |i, j| {
            if j >= start && j < start + c {
                src.at(i, j - start)
            } else {
                S::ZERO
            }
        });
        self.push(Op::PadCols { x, start }, t)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_cols of nothing");
        if xs.len() == 1 {
            return xs[0];
        }
        let rows = self.dims(xs[0]).0;
        for &x in xs {
            if self.dims(x).0 != rows {
                shape_panic("concat_cols", self.value(xs[0]).shape(), self.value(x).shape());
            }
        }
        let parts: Vec<Tensor<S>> = xs.iter().map(|&x| self.value(x).clone()).collect();
        let t = Tensor::concat_cols(&parts);
        self.push(Op::ConcatCols(xs.to_vec()), t)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Var {
        let src = self.value(x);
        if idx.iter().any(|&i| i >= src.rows()) || idx.is_empty() {
            shape_panic("gather_rows", src.shape(), &[idx.len()]);
        }
        let t = src.select_rows(&idx);
        self.push(Op::GatherRows { x, idx }, t)
    }

    /// Scatter-add of the rows of `x` into a zero `[rows, cols(x)]`.
    pub fn scatter_rows(&mut self, x: Var, idx: Arc<[usize]>, rows: usize) -> Var {
        let src = self.value(x);
        let c = src.cols();
        if idx.len() != src.rows() || idx.iter().any(|&i| i >= rows) {
            shape_panic("scatter_rows", src.shape(), &[rows, c]);
        }
        let mut out = vec![S::ZERO; rows * c];
        for (k, &i) in idx.iter().enumerate() {
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(src.row(k)) {
                *o += v;
            }
        }
        let t = Tensor::from_vec(rows, c, out);
        self.push(Op::ScatterRows { x, idx }, t)
    }

    // ---- composites -------------------------------------------------------------

    /// Layer norm over the last axis with affine `gamma`, `beta` (`[1, d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let y = self.normalize_rows(x, eps);
        let scaled = self.mul(y, gamma);
        self.add(scaled, beta)
    }

    /// Zero-mean, unit-variance rows (population variance, `eps` inside the root).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let d = self.dims(x).1 as f64;
        let s = self.sum_cols(x);
        let mean = self.scale(s, 1.0 / d);
        let centered = self.sub(x, mean);
        let sq = self.square(centered);
        let ss = self.sum_cols(sq);
        let var = self.scale(ss, 1.0 / d);
        let eps = self.scalar(S::from_f64(eps));
        let var_eps = self.add(var, eps);
        let inv_std = self.powf(var_eps, -0.5);
        self.mul(centered, inv_std)
    }

    /// Cross-entropy of a `[1, C]` logit row against class `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let ls = self.log_softmax(logits);
        let picked = self.slice_cols(ls, label, 1);
        self.neg(picked)
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse-mode gradients of the scalar `root` with respect to `wrt`.
    ///
    /// The returned gradients are graph nodes, so they can appear in further
    /// computations that are differentiated again. Variables that do not
    /// influence `root` get a zero gradient.
    pub fn backward(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let shape = self.value(root).shape().to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        let Some(lo) = wrt.iter().map(|v| v.0).min() else {
            return Ok(Vec::new());
        };
        if lo > root.0 {
            return Ok(wrt.iter().map(|&w| self.zeros_like(w)).collect());
        }
        let span = root.0 - lo + 1;
        let mut wanted = vec![false; span];
        let mut dep = vec![false; span];
        for w in wrt {
            if w.0 <= root.0 {
                wanted[w.0 - lo] = true;
                dep[w.0 - lo] = true;
            }
        }
        for id in lo..=root.0 {
            if dep[id - lo] {
                continue;
            }
            let mut any = false;
            self.nodes[id].op.inputs(|i| any |= i.0 >= lo && dep[i.0 - lo]);
            dep[id - lo] = any;
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; span];
        let mut found: Vec<Option<Var>> = vec![None; span];
        if dep[root.0 - lo] {
            let seed = self.scalar(S::ONE);
            adjoint[root.0 - lo] = Some(seed);
        }
        for id in (lo..=root.0).rev() {
            let Some(gy) = adjoint[id - lo].take() else { continue };
            if wanted[id - lo] {
                found[id - lo] = Some(gy);
            }
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let needed = |v: Var| v.0 >= lo && dep[v.0 - lo];
            let mut any = false;
            op.inputs(|i| any |= needed(i));
            if !any {
                continue;
            }
            let contributions = self.vjp(&op, Var(id), gy, needed);
            for (input, g) in contributions {
                if !needed(input) {
                    continue;
                }
                if !self.value(g).all_finite() {
                    return Err(Error::NonFiniteGradient { node: input.0, op: op.name() });
                }
                let slot = &mut adjoint[input.0 - lo];
                *slot = Some(match *slot {
                    None => g,
                    Some(prev) => self.add(prev, g),
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| match w.0.checked_sub(lo).and_then(|i| found.get(i).copied().flatten()) {
                Some(g) => g,
                None => self.zeros_like(w),
            })
            .collect())
    }

    /// Gradients as tensors, one entry per requested variable.
    pub fn grad_map(&mut self, root: Var, params: &[Var]) -> Result<GradMap<S>> {
        let grads = self.backward(root, params)?;
        Ok(GradMap {
            entries: params.iter().zip(grads).map(|(&p, g)| (p, self.value(g).clone())).collect(),
        })
    }

    fn zeros_like(&mut self, v: Var) -> Var {
        let (r, c) = self.dims(v);
        self.leaf(Tensor::zeros(r, c))
    }

    /// Vector-Jacobian products of one node, expressed as new graph nodes.
    fn vjp(
        &mut self,
        op: &Op,
        y: Var,
        gy: Var,
        needs: impl Fn(Var) -> bool,
    ) -> Vec<(Var, Var)> {
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    let (r, c) = self.dims(a);
                    out.push((a, self.sum_to(gy, r, c)));
                }
                if needs(b) {
                    let (r, c) = self.dims(b);
                    out.push((b, self.sum_to(gy, r, c)));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    let (r, c) = self.dims(a);
                    out.push((a, self.sum_to(gy, r, c)));
                }
                if needs(b) {
                    let (r, c) = self.dims(b);
                    let s = self.sum_to(gy, r, c);
                    out.push((b, self.neg(s)));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let (r, c) = self.dims(a);
                    let p = self.mul(gy, b);
                    out.push((a, self.sum_to(p, r, c)));
                }
                if needs(b) {
                    let (r, c) = self.dims(b);
                    let p = self.mul(gy, a);
                    out.push((b, self.sum_to(p, r, c)));
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    let (r, c) = self.dims(a);
                    let q = self.div(gy, b);
                    out.push((a, self.sum_to(q, r, c)));
                }
                if needs(b) {
                    // d(a/b)/db = -(a/b)/b
                    let (r, c) = self.dims(b);
                    let q = self.div(y, b);
                    let p = self.mul(gy, q);
                    let s = self.sum_to(p, r, c);
                    out.push((b, self.neg(s)));
                }
            }
            Op::Neg(x) => out.push((x, self.neg(gy))),
            Op::Scale(x, c) => out.push((x, self.scale(gy, c))),
            Op::MatMul { a, b, ta, tb } => {
                if needs(a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul_t(gy, b, false, true),
                        (false, true) => self.matmul_t(gy, b, false, false),
                        (true, false) => self.matmul_t(b, gy, false, true),
                        (true, true) => self.matmul_t(b, gy, true, true),
                    };
                    out.push((a, ga));
                }
                if needs(b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul_t(a, gy, true, false),
                        (false, true) => self.matmul_t(gy, a, true, false),
                        (true, false) => self.matmul_t(a, gy, false, false),
                        (true, true) => self.matmul_t(gy, a, true, true),
                    };
                    out.push((b, gb));
                }
            }
            Op::Transpose(x) => out.push((x, self.transpose(gy))),
            Op::SumTo(x) => {
                let (r, c) = self.dims(x);
                out.push((x, self.broadcast_to(gy, r, c)));
            }
            Op::BroadcastTo(x) => {
                let (r, c) = self.dims(x);
                out.push((x, self.sum_to(gy, r, c)));
            }
            Op::Exp(x) => out.push((x, self.mul(gy, y))),
            Op::Ln(x) => out.push((x, self.div(gy, x))),
            Op::Powf(x, p) => {
                let d = self.powf(x, p - 1.0);
                let d = self.scale(d, p);
                out.push((x, self.mul(gy, d)));
            }
            Op::HalfSumSq(x) => out.push((x, self.mul(x, gy))),
            Op::Gelu(x, k) => {
                let d = self.gelu_n(x, k + 1);
                out.push((x, self.mul(gy, d)));
            }
            Op::Elu(x, k) => {
                let d = self.elu_n(x, k + 1);
                out.push((x, self.mul(gy, d)));
            }
            Op::Softmax(x) => {
                // y * (gy - rowsum(gy * y))
                let gyy = self.mul(gy, y);
                let s = self.sum_cols(gyy);
                let centered = self.sub(gy, s);
                out.push((x, self.mul(y, centered)));
            }
            Op::LogSoftmax(x) => {
                // gy - softmax(x) * rowsum(gy)
                let p = self.exp(y);
                let s = self.sum_cols(gy);
                let ps = self.mul(p, s);
                out.push((x, self.sub(gy, ps)));
            }
            Op::SliceCols { x, start } => {
                let total = self.dims(x).1;
                out.push((x, self.pad_cols(gy, start, total)));
            }
            Op::PadCols { x, start } => {
                let len = self.dims(x).1;
                out.push((x, self.slice_cols(gy, start, len)));
            }
            Op::ConcatCols(ref xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.dims(x).1;
                    if needs(x) {
                        out.push((x, self.slice_cols(gy, offset, len)));
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, ref idx } => {
                let rows = self.dims(x).0;
                out.push((x, self.scatter_rows(gy, idx.clone(), rows)));
            }
            Op::ScatterRows { x, ref idx } => {
                out.push((x, self.gather_rows(gy, idx.clone())));
            }
        }
        out
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

#[cold]
fn shape_panic(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("{op}: shape mismatch {a:?} vs {b:?}")
}

pub(crate) fn softmax_rows<S: Real>(src: &Tensor<S>) -> Tensor<S> {
    let (r, c) = src.dims();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = src.row(i);
        let m = row.iter().copied().fold(row[0], S::max);
        let start = out.len();
        let mut z = S::ZERO;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / z;
        }
    }
    Tensor::from_vec(r, c, out)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `order`-th derivative of `GELU(x) = x * Phi(x)`.
///
/// For `k >= 1`: `x * Phi^(k)(x) + k * Phi^(k-1)(x)`, with
/// `Phi^(m) = (-1)^(m-1) He_(m-1)(x) phi(x)` for `m >= 1` (probabilists' Hermite).
pub fn gelu_derivative<S: Real>(x: S, order: u8) -> S {
    let half = S::from_f64(0.5);
    let cdf = |x: S| half * (S::ONE + (x * S::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = |x: S| S::from_f64(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
    match order {
        0 => x * cdf(x),
        1 => cdf(x) + x * pdf(x),
        2 => pdf(x) * (S::from_f64(2.0) - x * x),
        k => {
            // phi^(j) = (-1)^j He_j phi
            let hermite = |j: u8| -> S {
                let (mut h0, mut h1) = (S::ONE, x);
                if j == 0 {
                    return h0;
                }
                for i in 1..j {
                    let h2 = x * h1 - S::from_f64(i as f64) * h0;
                    h0 = h1;
                    h1 = h2;
                }
                h1
            };
            let sign = |j: u8| if j % 2 == 0 { S::ONE } else { -S::ONE };
            let p = pdf(x);
            let dk = sign(k - 1) * hermite(k - 1) * p;
            let dkm1 = sign(k - 2) * hermite(k - 2) * p;
            x * dk + S::from_f64(k as f64) * dkm1
        }
    }
}

/// `order`-th derivative of ELU with alpha = 1.
pub fn elu_derivative<S: Real>(x: S, order: u8) -> S {
    if x > S::ZERO {
        match order {
            0 => x,
            1 => S::ONE,
            _ => S::ZERO,
        }
    } else {
        match order {
            0 => x.exp() - S::ONE,
            _ => x.exp(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn scalar_products_and_reductions() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(1, 1, &[2.0]));
        let b = g.leaf(t(1, 1, &[3.0]));
        let c = g.matmul(a, b);
        assert_eq!(g.forward(c).item(), 6.0);

        let z = g.leaf(Tensor::zeros(1, 4));
        let s = g.sum(z);
        assert_eq!(g.forward(s).item(), 0.0);

        let zero = g.scalar(0.0);
        let y = g.gelu(zero);
        assert_eq!(g.forward(y).item(), 0.0);
    }

    #[test]
    fn first_derivatives() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(1, 1, &[2.0]));
        let x = g.leaf(t(1, 1, &[3.0]));
        let wx = g.mul(w, x);
        let dw = g.backward(wx, &[w]).unwrap();
        assert_eq!(g.value(dw[0]).item(), 3.0);

        let w0 = g.leaf(t(1, 1, &[0.0]));
        let one = g.scalar(1.0);
        let diff = g.sub(w0, one);
        let sq = g.square(diff);
        let half = g.scale(sq, 0.5);
        let d = g.backward(half, &[w0]).unwrap();
        assert_eq!(g.value(d[0]).item(), -1.0);
    }

    #[test]
    fn second_derivative_through_gradient() {
        // f(w) = w^3 / 3, f'(w) = w^2, d/dw [f'(w)^2] = 4 w^3
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(1, 1, &[1.5]));
        let w2 = g.square(w);
        let w3 = g.mul(w2, w);
        let f = g.scale(w3, 1.0 / 3.0);
        let df = g.backward(f, &[w]).unwrap()[0];
        assert!((g.value(df).item() - 2.25).abs() < 1e-15);
        let sq = g.square(df);
        let d2 = g.backward(sq, &[w]).unwrap()[0];
        assert!((g.value(d2).item() - 4.0 * 1.5f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn unrelated_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(1, 2, &[1.0, 2.0]));
        let b = g.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(a);
        let grads = g.backward(s, &[a, b]).unwrap();
        assert_eq!(g.value(grads[0]).data(), &[1.0, 1.0]);
        assert_eq!(g.value(grads[1]).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(1, 2, &[1.0, 2.0]));
        assert_eq!(g.backward(a, &[a]).unwrap_err(), Error::NonScalarRoot(vec![1, 2]));
    }

    #[test]
    fn nan_in_gradient_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(1, 1, &[0.0]));
        let l = g.ln(a);
        let s = g.sum(l);
        let err = g.backward(s, &[a]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { op: "ln", .. }), "{err:?}");
    }

    #[test]
    #[should_panic(expected = "matmul: shape mismatch [2, 3] vs [2, 3]")]
    fn matmul_shape_mismatch_panics_with_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(2, 3));
        g.matmul(a, a);
    }

    #[test]
    fn broadcasting_gradients_reduce() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(t(1, 3, &[1.0, 1.0, 1.0]));
        let c = g.leaf(t(2, 1, &[2.0, 3.0]));
        let y = g.add(x, b);
        let z = g.mul(y, c);
        let s = g.sum(z);
        let grads = g.backward(s, &[x, b, c]).unwrap();
        assert_eq!(g.value(grads[0]).data(), &[2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(g.value(grads[1]).data(), &[5.0, 5.0, 5.0]);
        assert_eq!(g.value(grads[2]).data(), &[9.0, 18.0]);
    }

    #[test]
    fn gelu_derivatives_match_finite_differences() {
        for &x in &[-2.5, -0.7, 0.0, 0.3, 1.9] {
            for k in 0u8..5 {
                let h = 1e-5;
                let fd = (gelu_derivative(x + h, k) - gelu_derivative(x - h, k)) / (2.0 * h);
                let an = gelu_derivative(x, k + 1);
                assert!((fd - an).abs() < 1e-7, "order {k} at {x}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]));
        let p = g.softmax(x);
        for r in 0..2 {
            let s: f64 = g.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }
}
