//! Reverse-mode gradient tape over dense matrices.
//!
//! Every value the losses in this crate need is produced by a recorded
//! operation on a [`Tape`]. Leaves are created with [`Tape::leaf`]; a call to
//! [`Tape::backward`] on a `1 x 1` node returns the gradient with respect to
//! every node on the tape.

use std::sync::atomic::{AtomicU64, Ordering};

use super::activations::{log_sigmoid, log_sum_exp, sigmoid, softmax, sparsemax};
use super::{Matrix, NumericsError, Scalar};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Div(usize, usize),
    AddRowBroadcast(usize, usize),
    DivRows(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    SoftmaxRows(usize),
    SparsemaxRows(usize),
    SumAll(usize),
    SumRows(usize),
    RowNorms(usize),
    LogSumExpRows(usize),
    Element(usize, usize, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    tape: u64,
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Result<Matrix<T>, NumericsError> {
        if v.tape != self.tape || v.idx >= self.shapes.len() {
            return Err(NumericsError::ForeignNode);
        }
        Ok(match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                Matrix::zeros(r, c)
            }
        })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, NumericsError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NumericsError::ForeignNode);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Matrix<T>, NumericsError> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn leaf(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::MatMul(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Sub(ia, ib)))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, "hadamard", |x, y| x * y)?;
        Ok(self.push(v, Op::Hadamard(ia, ib)))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(ia, ib)))
    }

    /// Adds the `1 x c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (am, bm) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if bm.rows() != 1 || bm.cols() != am.cols() {
            return Err(NumericsError::Shape {
                op: "add_row",
                left: am.shape(),
                right: bm.shape(),
            });
        }
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(bm.as_slice()) {
                *x = *x + b;
            }
        }
        Ok(self.push(v, Op::AddRowBroadcast(ia, ib)))
    }

    /// Divides row `i` of `a` by `divisor[i]`, where `divisor` is `n x 1`.
    pub fn div_rows(&mut self, a: Var, divisor: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(divisor)?);
        let (am, dm) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if dm.cols() != 1 || dm.rows() != am.rows() {
            return Err(NumericsError::Shape {
                op: "div_rows",
                left: am.shape(),
                right: dm.shape(),
            });
        }
        let mut v = am.clone();
        for r in 0..v.rows() {
            let d = dm.get(r, 0);
            for x in v.row_mut(r) {
                *x = *x / d;
            }
        }
        Ok(self.push(v, Op::DivRows(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.scale(c);
        Ok(self.push(v, Op::Scale(ia, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x.max(T::zero()));
        Ok(self.push(v, Op::Relu(ia)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(sigmoid);
        Ok(self.push(v, Op::Sigmoid(ia)))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(log_sigmoid);
        Ok(self.push(v, Op::LogSigmoid(ia)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.transpose();
        Ok(self.push(v, Op::Transpose(ia)))
    }

    /// `[a | b]`, joining columns of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (am, bm) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if am.rows() != bm.rows() {
            return Err(NumericsError::Shape {
                op: "concat_cols",
                left: am.shape(),
                right: bm.shape(),
            });
        }
        let mut v = Matrix::zeros(am.rows(), am.cols() + bm.cols());
        for r in 0..am.rows() {
            let row = v.row_mut(r);
            row[..am.cols()].copy_from_slice(am.row(r));
            row[am.cols()..].copy_from_slice(bm.row(r));
        }
        Ok(self.push(v, Op::ConcatCols(ia, ib)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.gather_rows(idx)?;
        Ok(self.push(v, Op::GatherRows(ia, idx.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let v = super::activations::softmax_rows(&self.nodes[ia].value);
        Ok(self.push(v, Op::SoftmaxRows(ia)))
    }

    pub fn sparsemax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let am = &self.nodes[ia].value;
        let mut v = am.clone();
        for r in 0..am.rows() {
            let p = sparsemax(am.row(r))?;
            v.row_mut(r).copy_from_slice(&p);
        }
        Ok(self.push(v, Op::SparsemaxRows(ia)))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let v = Matrix::filled(1, 1, self.nodes[ia].value.sum());
        Ok(self.push(v, Op::SumAll(ia)))
    }

    /// Sum over rows: `n x c` to `1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let am = &self.nodes[ia].value;
        let mut v = Matrix::zeros(1, am.cols());
        for r in 0..am.rows() {
            for (o, &x) in v.as_mut_slice().iter_mut().zip(am.row(r)) {
                *o = *o + x;
            }
        }
        Ok(self.push(v, Op::SumRows(ia)))
    }

    /// Euclidean norm of each row: `n x c` to `n x 1`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let am = &self.nodes[ia].value;
        let data = (0..am.rows()).map(|r| super::norm(am.row(r))).collect();
        let v = Matrix::from_vec(am.rows(), 1, data)?;
        Ok(self.push(v, Op::RowNorms(ia)))
    }

    /// Log-sum-exp of each row: `n x c` to `n x 1`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let am = &self.nodes[ia].value;
        let data = (0..am.rows()).map(|r| log_sum_exp(am.row(r))).collect();
        let v = Matrix::from_vec(am.rows(), 1, data)?;
        Ok(self.push(v, Op::LogSumExpRows(ia)))
    }

    /// Single entry as a `1 x 1` node.
    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let am = &self.nodes[ia].value;
        if r >= am.rows() || c >= am.cols() {
            return Err(NumericsError::Index {
                index: r * am.cols() + c,
                len: am.len(),
            });
        }
        let v = Matrix::filled(1, 1, am.get(r, c));
        Ok(self.push(v, Op::Element(ia, r, c)))
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, NumericsError> {
        let il = self.check(loss)?;
        if self.nodes[il].value.shape() != (1, 1) {
            return Err(NumericsError::NonScalarLoss(self.nodes[il].value.shape()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[il] = Some(Matrix::filled(1, 1, T::one()));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul(&bv.transpose())?)?;
                    accumulate(&mut grads, *b, av.transpose().matmul(&g)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-T::one()))?;
                }
                Op::Hadamard(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.zip_map(bv, "hadamard", |x, y| x * y)?)?;
                    accumulate(&mut grads, *b, g.zip_map(av, "hadamard", |x, y| x * y)?)?;
                }
                Op::Div(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.zip_map(bv, "div", |x, y| x / y)?)?;
                    let mut gb = g.zip_map(av, "div", |x, y| x * y)?;
                    gb = gb.zip_map(bv, "div", |x, y| -x / (y * y))?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddRowBroadcast(a, b) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::DivRows(a, d) => {
                    let av = &self.nodes[*a].value;
                    let dv = &self.nodes[*d].value;
                    let mut ga = g.clone();
                    let mut gd = Matrix::zeros(dv.rows(), 1);
                    for r in 0..g.rows() {
                        let den = dv.get(r, 0);
                        let mut acc = T::zero();
                        for c in 0..g.cols() {
                            ga.set(r, c, g.get(r, c) / den);
                            acc = acc + g.get(r, c) * av.get(r, c);
                        }
                        gd.set(r, 0, -acc / (den * den));
                    }
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *d, gd)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = g.zip_map(av, "relu", |x, y| if y > T::zero() { x } else { T::zero() })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, "sigmoid", |x, y| x * y * (T::one() - y))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::LogSigmoid(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = g.zip_map(av, "log_sigmoid", |x, y| x * (T::one() - sigmoid(y)))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::ConcatCols(a, b) => {
                    let ac = self.nodes[*a].value.cols();
                    let bc = self.nodes[*b].value.cols();
                    let mut ga = Matrix::zeros(g.rows(), ac);
                    let mut gb = Matrix::zeros(g.rows(), bc);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::GatherRows(a, idx) => {
                    let (ar, ac) = self.nodes[*a].value.shape();
                    let mut ga = Matrix::zeros(ar, ac);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = super::dot(g.row(r), y.row(r));
                        for c in 0..y.cols() {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - inner));
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SparsemaxRows(a) => {
                    let p = &node.value;
                    let mut ga = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let support: Vec<usize> = (0..p.cols()).filter(|&c| p.get(r, c) > T::zero()).collect();
                        if support.is_empty() {
                            continue;
                        }
                        let mean = support.iter().map(|&c| g.get(r, c)).sum::<T>() / T::lit(support.len() as f64);
                        for &c in &support {
                            ga.set(r, c, g.get(r, c) - mean);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SumAll(a) => {
                    let (ar, ac) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Matrix::filled(ar, ac, g.scalar()))?;
                }
                Op::SumRows(a) => {
                    let (ar, ac) = self.nodes[*a].value.shape();
                    let mut ga = Matrix::zeros(ar, ac);
                    for r in 0..ar {
                        ga.row_mut(r).copy_from_slice(g.as_slice());
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::RowNorms(a) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let n = node.value.get(r, 0);
                        if n > T::zero() {
                            let s = g.get(r, 0) / n;
                            for c in 0..av.cols() {
                                ga.set(r, c, s * av.get(r, c));
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::LogSumExpRows(a) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let s = softmax(av.row(r));
                        let gr = g.get(r, 0);
                        for (c, sc) in s.into_iter().enumerate() {
                            ga.set(r, c, gr * sc);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Element(a, r, c) => {
                    let (ar, ac) = self.nodes[*a].value.shape();
                    let mut ga = Matrix::zeros(ar, ac);
                    ga.set(*r, *c, g.scalar());
                    accumulate(&mut grads, *a, ga)?;
                }
            }
            grads[i] = Some(g);
        }

        Ok(Grads {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], idx: usize, g: Matrix<T>) -> Result<(), NumericsError> {
    match &mut grads[idx] {
        Some(acc) => acc.axpy(T::one(), &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
