//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! exact gradients for every node that depends on a parameter or a
//! differentiable input. Tapes are single-use and cheap to build.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ModelParams, ParamId};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from a generator seeded with `seed`.
    Train {
        seed: u64,
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Dropout(Var, Vec<f64>),
    Mse(Var, Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Propagate(Var, Rc<Tensor>),
    ShiftRows(Var, isize),
    AvgPoolRows(Var, usize),
    RowSum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        let seed = match mode {
            Mode::Eval => 0,
            Mode::Train { seed } => seed,
        };
        Tape {
            nodes: Vec::with_capacity(256),
            bound: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Data that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf, used by gradient checks on inputs.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ModelParams, id: ParamId) -> Var {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = params.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.requires_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = ta.matmul(tb)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, a: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err(name, ta, tr));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (x, &y) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    /// `a + row` with the `1×n` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() == 0 {
            return Err(Error::Shape {
                op: "softmax (empty axis)",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNorm(a, inv_std), rg)
    }

    /// Inverted dropout; the identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.is_training() || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::Dropout(a, mask), rg)
    }

    /// Mean squared error as a `1×1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", ta, tb));
        }
        let n = ta.len().max(1) as f64;
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut out = Tensor::zeros(ta.rows(), end - start);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let c = ta.cols();
        let out = Tensor::from_vec(end - start, c, ta.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Output row `r` is input row `idx[r]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::from_vec(idx.len(), c, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshaped(rows, cols)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Applies the constant `N×N` operator to each consecutive block of `N`
    /// rows: `out_b = op · a_b`. Used for graph propagation at every hour.
    pub fn propagate(&mut self, a: Var, op: Rc<Tensor>) -> Result<Var> {
        let ta = self.value(a);
        let n = op.rows();
        if op.cols() != n || n == 0 || !ta.rows().is_multiple_of(n) {
            return Err(shape_err("propagate", &op, ta));
        }
        let d = ta.cols();
        let mut out = Tensor::zeros(ta.rows(), d);
        for b in 0..ta.rows() / n {
            let range = b * n * d..(b + 1) * n * d;
            gemm(
                false,
                false,
                n,
                n,
                d,
                op.data(),
                &ta.data()[range.clone()],
                &mut out.data_mut()[range],
                0.0,
            );
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Propagate(a, op), rg))
    }

    /// `out[r] = a[r - shift]`, zero where that row does not exist.
    pub fn shift_rows(&mut self, a: Var, shift: isize) -> Var {
        let ta = self.value(a);
        let (m, c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(m, c);
        for r in 0..m {
            let src = r as isize - shift;
            if src >= 0 && (src as usize) < m {
                out.row_mut(r).copy_from_slice(ta.row(src as usize));
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::ShiftRows(a, shift), rg)
    }

    /// Means over consecutive groups of `window` rows; trailing rows dropped.
    pub fn avg_pool_rows(&mut self, a: Var, window: usize) -> Result<Var> {
        let ta = self.value(a);
        if window == 0 || ta.rows() < window {
            return Err(Error::Shape {
                op: "avg_pool_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![window],
            });
        }
        let m = ta.rows() / window;
        let c = ta.cols();
        let mut out = Tensor::zeros(m, c);
        for r in 0..m {
            for q in 0..window {
                for (o, x) in out.row_mut(r).iter_mut().zip(ta.row(r * window + q)) {
                    *o += x / window as f64;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AvgPoolRows(a, window), rg))
    }

    /// `m×n → m×1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|r| ta.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(ta.rows(), 1, data).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSum(a), rg)
    }

    /// Back-propagates from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.shape() != [1, 1] {
            return Err(Error::Shape {
                op: "backward (loss must be 1x1)",
                lhs: t.shape().to_vec(),
                rhs: vec![1, 1],
            });
        }
        self.backward_with(loss, Tensor::scalar(1.0))
    }

    /// Back-propagates an arbitrary upstream gradient `seed` for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err("backward seed", self.value(out), &seed));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        // lazily allocated gradient slot of a parent
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let shape = nodes[v.0].value.shape();
                grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
            }};
        }
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let da = slot!(*a);
                    gemm(false, true, m, n, k, g.data(), tb.data(), da.data_mut(), 1.0);
                }
                if needs(*b) {
                    let db = slot!(*b);
                    gemm(true, false, k, m, n, ta.data(), g.data(), db.data_mut(), 1.0);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    add_into(slot!(*a), &g.transpose());
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(slot!(*a), g);
                }
                if needs(*b) {
                    add_into(slot!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(slot!(*a), g);
                }
                if needs(*b) {
                    for (d, s) in slot!(*b).data_mut().iter_mut().zip(g.data()) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if needs(*a) {
                    for ((d, s), x) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *d += s * x;
                    }
                }
                if needs(*b) {
                    for ((d, s), x) in slot!(*b).data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    add_into(slot!(*a), g);
                }
                if needs(*row) {
                    let dr = slot!(*row);
                    for r in 0..g.rows() {
                        for (d, s) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
                if needs(*a) {
                    let da = slot!(*a);
                    for r in 0..g.rows() {
                        for ((d, s), w) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(tr.data()) {
                            *d += s * w;
                        }
                    }
                }
                if needs(*row) {
                    let dr = slot!(*row);
                    for r in 0..g.rows() {
                        for ((d, s), x) in dr.data_mut().iter_mut().zip(g.row(r)).zip(ta.row(r)) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    for (d, s) in slot!(*a).data_mut().iter_mut().zip(g.data()) {
                        *d += c * s;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    for ((d, s), y) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += s * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    for ((d, s), y) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    for ((d, s), y) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        if *y > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let da = slot!(*a);
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, s), p) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d += p * (s - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(a, inv_std) => {
                if needs(*a) {
                    let da = slot!(*a);
                    let n = g.cols() as f64;
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, s), yv) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d += inv_std[r] * (s - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if needs(*a) {
                    for ((d, s), m) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let c = 2.0 * g.data()[0] / ta.len().max(1) as f64;
                if needs(*a) {
                    for ((d, x), y) in slot!(*a).data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        *d += c * (x - y);
                    }
                }
                if needs(*b) {
                    for ((d, x), y) in slot!(*b).data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        *d -= c * (x - y);
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let s = g.data()[0];
                    for d in slot!(*a).data_mut() {
                        *d += s;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if needs(p) {
                        let dp = slot!(p);
                        for r in 0..g.rows() {
                            for (d, s) in dp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if needs(p) {
                        for (d, s) in slot!(p).data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                            *d += s;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                if needs(*a) {
                    let da = slot!(*a);
                    for r in 0..g.rows() {
                        for (d, s) in da.row_mut(r)[*start..].iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if needs(*a) {
                    let da = slot!(*a);
                    let c = g.cols();
                    for (d, s) in da.data_mut()[start * c..].iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(*a) {
                    let da = slot!(*a);
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, s) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    for (d, s) in slot!(*a).data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::Propagate(a, op) => {
                if needs(*a) {
                    let da = slot!(*a);
                    let n = op.rows();
                    let d = g.cols();
                    for b in 0..g.rows() / n {
                        let range = b * n * d..(b + 1) * n * d;
                        gemm(
                            true,
                            false,
                            n,
                            n,
                            d,
                            op.data(),
                            &g.data()[range.clone()],
                            &mut da.data_mut()[range],
                            1.0,
                        );
                    }
                }
            }
            Op::ShiftRows(a, shift) => {
                if needs(*a) {
                    let da = slot!(*a);
                    let m = g.rows() as isize;
                    for r in 0..m {
                        let src = r - shift;
                        if src >= 0 && src < m {
                            for (d, s) in da.row_mut(src as usize).iter_mut().zip(g.row(r as usize)) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::AvgPoolRows(a, window) => {
                if needs(*a) {
                    let da = slot!(*a);
                    let inv = 1.0 / *window as f64;
                    for r in 0..g.rows() {
                        for q in 0..*window {
                            for (d, s) in da.row_mut(r * window + q).iter_mut().zip(g.row(r)) {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                if needs(*a) {
                    let da = slot!(*a);
                    for r in 0..g.rows() {
                        let s = g.get(r, 0);
                        for d in da.row_mut(r) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into `params[*].grad`.
    pub fn accumulate(&self, tape: &Tape, params: &mut ModelParams) {
        for (i, g) in self.grads.iter().enumerate() {
            if let (Some(g), Op::Param(id)) = (g, &tape.nodes[i].op) {
                add_into(&mut params.get_mut(*id).grad, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut t = Tape::new(Mode::Eval);
        let x = t.constant(Tensor::row_vector(vec![0.0, 0.0, 0.0]));
        let y = t.softmax(x).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        let mut t = Tape::new(Mode::Eval);
        let x = t.constant(Tensor::zeros(2, 0));
        assert!(t.softmax(x).is_err());
    }

    #[test]
    fn mse_of_equal_inputs_is_zero_with_zero_gradient() {
        let mut t = Tape::new(Mode::Eval);
        let x = t.input(Tensor::row_vector(vec![1.0, -2.0, 3.5]));
        let y = t.input(Tensor::row_vector(vec![1.0, -2.0, 3.5]));
        let l = t.mse(x, y).unwrap();
        assert_eq!(t.value(l).data()[0], 0.0);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_errors() {
        let mut t = Tape::new(Mode::Eval);
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(3, 4));
        let c = t.constant(Tensor::zeros(4, 3));
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(ab), [2, 4]);
        let err = t.matmul(a, c).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 3]"));
    }

    #[test]
    fn dropout_eval_identity_and_seeded_masks() {
        let x = Tensor::filled(4, 8, 1.0);
        let mut t = Tape::new(Mode::Eval);
        let v = t.constant(x.clone());
        let d = t.dropout(v, 0.5);
        assert_eq!(t.value(d), &x);

        let run = |seed| {
            let mut t = Tape::new(Mode::Train { seed });
            let v = t.constant(x.clone());
            let d = t.dropout(v, 0.5);
            t.value(d).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert!(run(3).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn layer_norm_moments() {
        let mut t = Tape::new(Mode::Eval);
        let x = t.constant(Tensor::from_rows(&[[1.0, 2.0, 4.0, 9.0], [-3.0, 0.5, 0.5, 7.0]]));
        let y = t.layer_norm(x, 1e-12);
        for r in 0..2 {
            let row = t.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn unused_branches_get_no_gradient() {
        let mut params = ModelParams::new();
        let p = params.add("p", Tensor::filled(1, 2, 3.0));
        let q = params.add("q", Tensor::filled(1, 2, 5.0));
        let mut t = Tape::new(Mode::Eval);
        let pv = t.param(&params, p);
        let _qv = t.param(&params, q);
        let s = t.sum(pv);
        let g = t.backward(s).unwrap();
        g.accumulate(&t, &mut params);
        assert_eq!(params.get(p).grad.data(), &[1.0, 1.0]);
        assert_eq!(params.get(q).grad.data(), &[0.0, 0.0]);
    }
}
