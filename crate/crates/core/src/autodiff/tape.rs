//! Reverse-mode automatic differentiation over a recorded list of tensor ops.
//!
//! A [`Tape`] is append-only: every op pushes one node whose inputs have
//! strictly smaller ids, so insertion order is a topological order and the
//! backward sweep simply walks the nodes in reverse, touching each once.

use super::tensor::{gelu, gelu_grad, matmul, Tensor};
use crate::error::{Error, Result};
use crate::math::sigmoid;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Gelu(Var),
    Softplus(Var),
    Square(Var),
    SumAll(Var),
    RowSum(Var),
    CumSum(Var),
    GatherCols(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    GatherLse(Var, Vec<Vec<usize>>),
    Reshape(Var),
    SliceRows(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-writer computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when no path reached it.
    pub fn wrt_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), false, self.value(b), false);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows, 1);
        assert_eq!(av.cols, bv.cols);
        let mut out = av.clone();
        for r in 0..out.rows {
            for (x, b) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + s` with `s` a `1 x 1` node broadcast over `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x + sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::AddScalar(a, s), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::MulScalar(a, s), ng)
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x / sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::DivScalar(a, s), ng)
    }

    /// Multiplies each row of `a` (`m x n`) by the matching entry of `c` (`m x 1`).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        assert_eq!(cv.cols, 1);
        assert_eq!(av.rows, cv.rows);
        let mut out = av.clone();
        for r in 0..out.rows {
            let k = cv.data[r];
            for x in &mut out.data[r * out.cols..(r + 1) * out.cols] {
                *x *= k;
            }
        }
        let ng = self.ng(a) || self.ng(c);
        self.push(out, Op::MulCol(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::Offset(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(crate::math::softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row into an `m x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row_slice(r).iter().sum()).collect();
        let v = Tensor::column(data);
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    /// Cumulative sum along the columns of each row.
    pub fn cumsum(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        for r in 0..out.rows {
            let row = &mut out.data[r * cols..(r + 1) * cols];
            for j in 1..cols {
                row[j] += row[j - 1];
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::CumSum(a), ng)
    }

    /// Picks entries of a `1 x n` row vector into an `m x 1` column.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, 1);
        let v = Tensor::column(idx.iter().map(|&j| av.data[j]).collect());
        let ng = self.ng(a);
        self.push(v, Op::GatherCols(a, idx), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..av.rows {
            let lse = crate::math::logsumexp(av.row_slice(r));
            for x in &mut out.data[r * av.cols..(r + 1) * av.cols] {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Row-wise log-sum-exp over a chosen subset of columns, giving `m x 1`.
    pub fn gather_logsumexp(&mut self, a: Var, sets: Vec<Vec<usize>>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, sets.len());
        let data = sets
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let picked: Vec<f64> = s.iter().map(|&j| av.get(r, j)).collect();
                crate::math::logsumexp(&picked)
            })
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::column(data), Op::GatherLse(a, sets), ng)
    }

    /// Reinterprets the row-major buffer of `a` with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols);
        let v = Tensor::new(rows, cols, av.data.clone());
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.rows);
        let v = Tensor::new(end - start, av.cols, av.data[start * av.cols..end * av.cols].to_vec());
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    /// Gradients of the scalar node `out` with respect to every node on the tape.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                ov.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(a) {
                    let ga = matmul(g, false, self.value(b), true);
                    self.accumulate(grads, a, ga);
                }
                if self.ng(b) {
                    let gb = matmul(self.value(a), true, g, false);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, a, g.clone());
                if self.ng(bias) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, x) in gb.data.iter_mut().zip(g.row_slice(r)) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, bias, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, s, Tensor::scalar(g.sum()));
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(s).item();
                if self.ng(a) {
                    self.accumulate(grads, a, g.map(|x| x * sv));
                }
                if self.ng(s) {
                    let d: f64 = g.data.iter().zip(&self.value(a).data).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, s, Tensor::scalar(d));
                }
            }
            Op::DivScalar(a, s) => {
                let sv = self.value(s).item();
                if self.ng(a) {
                    self.accumulate(grads, a, g.map(|x| x / sv));
                }
                if self.ng(s) {
                    let d: f64 = g.data.iter().zip(&self.value(a).data).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, s, Tensor::scalar(-d / (sv * sv)));
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(a), self.value(c));
                if self.ng(a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows {
                        let k = cv.data[r];
                        for x in &mut ga.data[r * ga.cols..(r + 1) * ga.cols] {
                            *x *= k;
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.ng(c) {
                    let data = (0..g.rows)
                        .map(|r| g.row_slice(r).iter().zip(av.row_slice(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, c, Tensor::column(data));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|x| x * c)),
            Op::Offset(a) => self.accumulate(grads, a, g.clone()),
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(a), |x, y| x * gelu_grad(y));
                self.accumulate(grads, a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(a), |x, y| x * sigmoid(y));
                self.accumulate(grads, a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(a), |x, y| 2.0 * x * y);
                self.accumulate(grads, a, ga);
            }
            Op::SumAll(a) => {
                let av = self.value(a);
                self.accumulate(grads, a, Tensor::filled(av.rows, av.cols, g.item()));
            }
            Op::RowSum(a) => {
                let av = self.value(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let k = g.data[r];
                    for x in &mut ga.data[r * av.cols..(r + 1) * av.cols] {
                        *x = k;
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::CumSum(a) => {
                let mut ga = g.clone();
                let cols = ga.cols;
                for r in 0..ga.rows {
                    let row = &mut ga.data[r * cols..(r + 1) * cols];
                    for j in (0..cols.saturating_sub(1)).rev() {
                        row[j] += row[j + 1];
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::GatherCols(a, ref idx) => {
                let av = self.value(a);
                let mut ga = Tensor::zeros(1, av.cols);
                for (r, &j) in idx.iter().enumerate() {
                    ga.data[j] += g.data[r];
                }
                self.accumulate(grads, a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                let cols = ga.cols;
                for r in 0..ga.rows {
                    let gs: f64 = g.row_slice(r).iter().sum();
                    for (j, x) in ga.data[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                        *x -= value.get(r, j).exp() * gs;
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::GatherLse(a, ref sets) => {
                let av = self.value(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (r, s) in sets.iter().enumerate() {
                    let out = value.data[r];
                    for &j in s {
                        ga.data[r * av.cols + j] += g.data[r] * (av.get(r, j) - out).exp();
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::Reshape(a) => {
                let av = self.value(a);
                self.accumulate(grads, a, Tensor::new(av.rows, av.cols, g.data.clone()));
            }
            Op::SliceRows(a, start) => {
                let av = self.value(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                ga.data[start * av.cols..start * av.cols + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, a, ga);
            }
        }
    }
}
