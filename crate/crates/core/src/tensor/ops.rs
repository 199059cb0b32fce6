//! Differentiable operations on [`Var`].
//!
//! Binary elementwise ops accept equal shapes or trailing-dimension
//! broadcasting (the smaller operand's shape is a suffix of the larger one,
//! e.g. a `[C]` bias against an `[N, C]` matrix).

use std::rc::Rc;
use std::sync::Arc;

use super::{Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    RhsIntoLhs,
    LhsIntoRhs,
}

fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if lhs.ends_with(rhs) {
        Ok(Broadcast::RhsIntoLhs)
    } else if rhs.ends_with(lhs) {
        Ok(Broadcast::LhsIntoRhs)
    } else {
        shape_err(format!("cannot broadcast {lhs:?} with {rhs:?}"))
    }
}

/// Sums `g` (length a multiple of `n`) down to length `n` by folding.
fn fold_sum(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

/// Row-major `[n, k] x [k, m]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for (row, out_row) in a.chunks(k).zip(out.chunks_mut(m)) {
        for (&x, b_row) in row.iter().zip(b.chunks(m)) {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in out_row.iter_mut().zip(b_row) {
                *o += x * w;
            }
        }
    }
    out
}

/// `a^T b` for `a: [n, k]`, `b: [n, m]`.
fn matmul_at_b(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for (a_row, b_row) in a.chunks(k).zip(b.chunks(m)).take(n) {
        for (i, &x) in a_row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a b^T` for `a: [n, m]`, `b: [k, m]`.
fn matmul_a_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for (a_row, out_row) in a.chunks(m).zip(out.chunks_mut(k)).take(n) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks(m)) {
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("shape computed by the op")
}

/// Row index table for [`Var::gather`]: `rows x cols` source indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherIndex {
    cols: usize,
    idx: Arc<[usize]>,
}

impl GatherIndex {
    pub fn new(idx: impl Into<Arc<[usize]>>, cols: usize) -> Result<Self> {
        let idx = idx.into();
        if cols == 0 || idx.len() % cols != 0 {
            return shape_err(format!("{} indices do not split into rows of {cols}", idx.len()));
        }
        Ok(Self { cols, idx })
    }

    pub fn rows(&self) -> usize {
        self.idx.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    fn check_bounds(&self, len: usize) -> Result<()> {
        match self.idx.iter().find(|&&i| i >= len) {
            Some(&index) => Err(Error::Index { index, len }),
            None => Ok(()),
        }
    }
}

fn scatter_add_raw(g: &[f64], idx: &[usize], rows: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * c];
    for (&src, chunk) in idx.iter().zip(g.chunks(c)) {
        for (o, &x) in out[src * c..(src + 1) * c].iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

fn gather_raw(x: &[f64], idx: &[usize], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * c);
    for &src in idx {
        out.extend_from_slice(&x[src * c..(src + 1) * c]);
    }
    out
}

impl<'t> Var<'t> {
    fn unary(
        self,
        forward: impl Fn(f64) -> f64,
        derivative: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(forward));
        let y_keep = Rc::clone(&y);
        self.tape().record(&[self], (*y).clone(), move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_keep.data())
                .map(|((&g, &x), &y)| g * derivative(x, y))
                .collect();
            vec![Some(tensor(x.shape(), data))]
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(move |x| factor * x, move |_, _| factor)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let kind = broadcast_kind(a.shape(), b.shape())?;
        let (big, small) = match kind {
            Broadcast::LhsIntoRhs => (&b, &a),
            _ => (&a, &b),
        };
        let n = small.numel();
        let data = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + small.data()[i % n])
            .collect();
        let out = tensor(big.shape(), data);
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().record(&[self, other], out, move |g| {
            let reduce = |shape: &[usize]| {
                if shape == g.shape() {
                    g.clone()
                } else {
                    let n = shape.iter().product();
                    tensor(shape, fold_sum(g.data(), n))
                }
            };
            vec![Some(reduce(&a_shape)), Some(reduce(&b_shape))]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.add(other.scale(-1.0))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let kind = broadcast_kind(a.shape(), b.shape())?;
        let (big, small) = match kind {
            Broadcast::LhsIntoRhs => (&b, &a),
            _ => (&a, &b),
        };
        let n = small.numel();
        let data = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * small.data()[i % n])
            .collect();
        let out = tensor(big.shape(), data);
        let swapped = kind == Broadcast::LhsIntoRhs;
        let (big, small) = (Rc::clone(big), Rc::clone(small));
        Ok(self.tape().record(&[self, other], out, move |g| {
            let n = small.numel();
            let g_big: Vec<f64> = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g * small.data()[i % n])
                .collect();
            let g_small_full: Vec<f64> =
                g.data().iter().zip(big.data()).map(|(&g, &x)| g * x).collect();
            let g_big = tensor(big.shape(), g_big);
            let g_small = tensor(small.shape(), fold_sum(&g_small_full, n));
            if swapped {
                vec![Some(g_small), Some(g_big)]
            } else {
                vec![Some(g_big), Some(g_small)]
            }
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape()
            .record(&[self], Tensor::scalar(x.sum()), move |g| {
                vec![Some(Tensor::full(shape.clone(), g.item()))]
            })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let from = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape().record(&[self], out, move |g| {
            vec![Some(g.clone().reshape(from.clone()).expect("same numel"))]
        }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return shape_err(format!("slice {start}..{end} on axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        Ok(self.tape().record(&[self], tensor(&out_shape, data), move |g| {
            let mut full = vec![0.0; shape.iter().product()];
            let width = (end - start) * inner;
            for (o, chunk) in g.data().chunks(width).enumerate() {
                let base = o * len * inner + start * inner;
                full[base..base + width].copy_from_slice(chunk);
            }
            vec![Some(tensor(&shape, full))]
        }))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (&[n, k], &[k2, m]) = (a.shape(), b.shape()) else {
            return shape_err(format!("matmul needs matrices, got {:?} and {:?}", a.shape(), b.shape()));
        };
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} != {k2}"));
        }
        let out = tensor(&[n, m], matmul_raw(a.data(), b.data(), n, k, m));
        Ok(self.tape().record(&[self, other], out, move |g| {
            let da = matmul_a_bt(g.data(), b.data(), n, m, k);
            let db = matmul_at_b(a.data(), g.data(), n, k, m);
            vec![Some(tensor(&[n, k], da)), Some(tensor(&[k, m], db))]
        }))
    }

    /// `[n, c] -> [rows, cols, c]` with `out[i, j] = x[index[i, j]]`.
    pub fn gather(self, index: &GatherIndex) -> Result<Var<'t>> {
        let x = self.value();
        let &[rows, c] = x.shape() else {
            return shape_err(format!("gather needs a matrix, got {:?}", x.shape()));
        };
        index.check_bounds(rows)?;
        let out = tensor(
            &[index.rows(), index.cols(), c],
            gather_raw(x.data(), index.indices(), c),
        );
        let index = index.clone();
        Ok(self.tape().record(&[self], out, move |g| {
            vec![Some(tensor(
                &[rows, c],
                scatter_add_raw(g.data(), index.indices(), rows, c),
            ))]
        }))
    }

    /// Adjoint of [`Var::gather`]: `[rows, cols, c] -> [target_rows, c]`,
    /// accumulating duplicates.
    pub fn scatter_add(self, index: &GatherIndex, target_rows: usize) -> Result<Var<'t>> {
        let y = self.value();
        let &[rows, cols, c] = y.shape() else {
            return shape_err(format!("scatter_add needs rank 3, got {:?}", y.shape()));
        };
        if rows != index.rows() || cols != index.cols() {
            return shape_err(format!(
                "scatter_add source {:?} vs index {}x{}",
                y.shape(),
                index.rows(),
                index.cols()
            ));
        }
        index.check_bounds(target_rows)?;
        let out = tensor(
            &[target_rows, c],
            scatter_add_raw(y.data(), index.indices(), target_rows, c),
        );
        let index = index.clone();
        Ok(self.tape().record(&[self], out, move |g| {
            vec![Some(tensor(
                &[rows, cols, c],
                gather_raw(g.data(), index.indices(), c),
            ))]
        }))
    }
}

/// `x W + b` for `x: [n, c_in]`, `W: [c_in, c_out]`, `b: [c_out]`.
pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    let y = x.matmul(weight)?;
    match bias {
        Some(b) => {
            let (ys, bs) = (y.shape(), b.shape());
            if bs.len() != 1 || bs[0] != ys[1] {
                return shape_err(format!("bias {bs:?} does not match output {ys:?}"));
            }
            y.add(b)
        }
        None => Ok(y),
    }
}

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return shape_err("concat of nothing");
    };
    let values: Vec<Rc<Tensor>> = parts.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return shape_err(format!("concat axis {axis} on rank {}", base.len()));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b)
        {
            return shape_err(format!("concat {base:?} with {s:?} on axis {axis}"));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (v, &w) in values.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total / inner;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape().record(parts, tensor(&shape, data), move |g| {
        let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(outer * w)).collect();
        for row in g.data().chunks(total) {
            let mut offset = 0;
            for (grad, &w) in grads.iter_mut().zip(&widths) {
                grad.extend_from_slice(&row[offset..offset + w]);
                offset += w;
            }
        }
        grads
            .into_iter()
            .zip(&shapes)
            .map(|(d, s)| Some(tensor(s, d)))
            .collect()
    }))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
