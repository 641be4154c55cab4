//! Reverse-mode differentiation over a flat tape of matrix operations.
//!
//! Every forward op appends a node; `backward` walks the tape once in reverse.
//! Frozen weights enter as `Arc`-shared constants so building a graph never
//! copies backbone parameters. Nodes that cannot reach a parameter are never
//! visited during the backward pass.

use std::sync::Arc;

use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    MatMulConst(Var, Arc<Matrix<T>>),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowConst(Var),
    AddRowVar(Var, Var),
    Scale(Var, T),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Arc<Matrix<T>>,
        // normalized activations and 1/σ per row, cached for backward
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    NormalizeRows(Var, Vec<T>),
    SumAll(Var),
    Pick(Var, usize, usize),
    Sum(Vec<Var>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn matmul_const(&mut self, a: Var, w: &Arc<Matrix<T>>) -> Var {
        let v = self.value(a).matmul(w);
        let rg = self.rg(&[a]);
        self.push(v, Op::MatMulConst(a, Arc::clone(w)), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Adds a constant `1 × cols` row to every row of `a`.
    pub fn add_row_const(&mut self, a: Var, bias: &Arc<Matrix<T>>) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(bias.shape(), (1, v.cols()), "bias shape");
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(bias.as_slice()) {
                *x = *x + b;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::AddRowConst(a), rg)
    }

    /// Adds the `1 × cols` variable `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        assert_eq!(r.shape(), (1, v.cols()), "broadcast row shape");
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x = *x + b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRowVar(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&mats);
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols rows");
            for i in 0..rows {
                v.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..x.rows() {
            let row = v.row_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            for z in row.iter_mut() {
                *z = *z - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with constant affine parameters.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: &Arc<Matrix<T>>,
        beta: &Arc<Matrix<T>>,
        eps: T,
    ) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::from_usize(cols).unwrap();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().copied().sum::<T>() / n;
            let var = r.iter().map(|&z| (z - mean) * (z - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (r[j] - mean) * is;
                xhat[(i, j)] = h;
                out[(i, j)] = h * gamma.as_slice()[j] + beta.as_slice()[j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma: Arc::clone(gamma),
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(0.044_715);
        let half = T::lit(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    /// Scales each row to unit L2 norm. A zero row yields NaNs.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = crate::tensor::l2_norm(x.row(i));
            norms.push(n);
            for z in v.row_mut(i) {
                *z = *z / n;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::NormalizeRows(a, norms), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn pick(&mut self, a: Var, i: usize, j: usize) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a)[(i, j)]]);
        let rg = self.rg(&[a]);
        self.push(v, Op::Pick(a, i, j), rg)
    }

    /// Element-wise sum of equally shaped variables.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of nothing");
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v.add_assign(self.value(p));
        }
        let rg = self.rg(parts);
        self.push(v, Op::Sum(parts.to_vec()), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::MatMulConst(a, w) => self.accumulate(grads, *a, g.matmul_t(w)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::AddRowConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRowVar(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    let mut r = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (acc, &x) in r.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *acc = *acc + x;
                        }
                    }
                    self.accumulate(grads, *row, r);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if rows > 0 {
                        self.accumulate(grads, p, g.slice_rows(offset, rows));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut sub = Matrix::zeros(g.rows(), cols);
                        for i in 0..g.rows() {
                            sub.row_mut(i)
                                .copy_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, sub);
                    }
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut full = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    full.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, full);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let inner = crate::tensor::dot(yr, gr);
                    for j in 0..y.cols() {
                        dx[(i, j)] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let gr = g.row(i);
                    let gsum: T = gr.iter().copied().sum();
                    for j in 0..y.cols() {
                        dx[(i, j)] = gr[j] - y[(i, j)].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let n = T::from_usize(cols).unwrap();
                let mut dx = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    let dxhat: Vec<T> = (0..cols)
                        .map(|j| g[(i, j)] * gamma.as_slice()[j])
                        .collect();
                    let sum_d: T = dxhat.iter().copied().sum();
                    let sum_dh: T = dxhat
                        .iter()
                        .zip(xhat.row(i))
                        .map(|(&d, &h)| d * h)
                        .sum();
                    for j in 0..cols {
                        dx[(i, j)] = inv_std[i] / n
                            * (n * dxhat[j] - sum_d - xhat[(i, j)] * sum_dh);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(0.044_715);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let x = self.value(*a);
                let dx = x.zip_map(g, |x, gy| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (T::one() + three * k * x * x);
                    gy * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                });
                self.accumulate(grads, *a, dx);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let dx = x.zip_map(g, |x, gy| if x > T::zero() { gy } else { T::zero() });
                self.accumulate(grads, *a, dx);
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let dx = x.zip_map(g, |x, gy| {
                    if x > T::zero() {
                        gy
                    } else if x < T::zero() {
                        -gy
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, dx);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let inner = crate::tensor::dot(yr, gr);
                    for j in 0..y.cols() {
                        dx[(i, j)] = (gr[j] - yr[j] * inner) / norms[i];
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::Pick(a, i, j) => {
                let (r, c) = self.value(*a).shape();
                let mut m = Matrix::zeros(r, c);
                m[(*i, *j)] = g.as_slice()[0];
                self.accumulate(grads, *a, m);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, g.clone());
                }
            }
        }
    }
}

pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut v = x.clone();
    for i in 0..v.rows() {
        let row = v.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            total = total + *z;
        }
        for z in row.iter_mut() {
            *z = *z / total;
        }
    }
    v
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, materializing exact zeros when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}
