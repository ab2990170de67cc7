//! Primitive tensor kernels and their differentiable graph counterparts.
//!
//! No implicit broadcasting: each op states its own shape rule and rejects
//! everything else with [`Error::ShapeMismatch`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Backward, Graph, Var};
use crate::tensor::Tensor;

// ── dense matrix helpers ─────────────────────────────────────────────

/// `a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

// ── kernels ──────────────────────────────────────────────────────────

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner extents {k} and {k2} differ")));
    }
    Ok(Tensor::new_unchecked(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n)))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = dims2("transpose", a)?;
    Ok(Tensor::new_unchecked(vec![c, r], transpose_raw(a.data(), r, c)))
}

fn transpose_raw<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new_unchecked(x.shape().to_vec(), out)
}

pub fn concat_lastdim<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::EmptyInput { op: "concat_lastdim" })?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank().saturating_sub(1)] != lead {
            return Err(Error::shape(
                "concat_lastdim",
                format!("leading extents {:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::new_unchecked(shape, out))
}

pub fn slice_lastdim<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let n = x.last_dim();
    if len == 0 || start + len > n {
        return Err(Error::shape(
            "slice_lastdim",
            format!("range {start}..{} outside last extent {n}", start + len),
        ));
    }
    let out: Vec<T> = x
        .data()
        .chunks(n)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::new_unchecked(shape, out))
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new_unchecked(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Mean two-class-or-more cross-entropy of `logits[P×K]` against integer labels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (p, k) = dims2("cross_entropy", logits)?;
    if labels.len() != p || labels.iter().any(|&l| l >= k) {
        return Err(Error::shape("cross_entropy", format!("{} labels for {p}x{k} logits", labels.len())));
    }
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[label];
    }
    Ok(total / T::of(p as f64))
}

// ── backward rules ───────────────────────────────────────────────────

struct MatmulBack {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for MatmulBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let da = needs[0].then(|| gemm_nt(grad, inputs[1].data(), m, n, k));
        let db = needs[1].then(|| gemm_tn(inputs[0].data(), grad, m, k, n));
        vec![da, db]
    }
}

struct TransposeBack {
    rows: usize,
    cols: usize,
}

impl<T: Scalar> Backward<T> for TransposeBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        // grad has shape [cols×rows]
        vec![Some(transpose_raw(grad, self.cols, self.rows))]
    }
}

struct AddBack;

impl<T: Scalar> Backward<T> for AddBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        needs.iter().map(|&n| n.then(|| grad.to_vec())).collect()
    }
}

struct SubBack;

impl<T: Scalar> Backward<T> for SubBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            needs[0].then(|| grad.to_vec()),
            needs[1].then(|| grad.iter().map(|&g| -g).collect()),
        ]
    }
}

struct MulBack;

impl<T: Scalar> Backward<T> for MulBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let times = |other: &Tensor<T>| grad.iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
        vec![needs[0].then(|| times(inputs[1])), needs[1].then(|| times(inputs[0]))]
    }
}

struct ScaleBack<T>(T);

impl<T: Scalar> Backward<T> for ScaleBack<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.0).collect())]
    }
}

struct SumBack {
    len: usize,
    factor: f64,
}

impl<T: Scalar> Backward<T> for SumBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0] * T::of(self.factor); self.len])]
    }
}

struct ReshapeBack;

impl<T: Scalar> Backward<T> for ReshapeBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct ConcatBack {
    widths: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.widths.iter().sum();
        let rows = grad.len() / total;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.widths.len());
        for (&w, &need) in self.widths.iter().zip(needs) {
            out.push(need.then(|| {
                let mut g = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    g.extend_from_slice(&grad[r * total + offset..r * total + offset + w]);
                }
                g
            }));
            offset += w;
        }
        out
    }
}

struct SliceBack {
    start: usize,
    len: usize,
    width: usize,
}

impl<T: Scalar> Backward<T> for SliceBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let rows = grad.len() / self.len;
        let mut g = vec![T::zero(); rows * self.width];
        for r in 0..rows {
            g[r * self.width + self.start..r * self.width + self.start + self.len]
                .copy_from_slice(&grad[r * self.len..(r + 1) * self.len]);
        }
        vec![Some(g)]
    }
}

struct SoftmaxBack;

impl<T: Scalar> Backward<T> for SoftmaxBack {
    fn backward(&self, _: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let n = output.last_dim();
        let mut g = vec![T::zero(); grad.len()];
        for ((y, dy), dx) in output.data().chunks(n).zip(grad.chunks(n)).zip(g.chunks_mut(n)) {
            let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
            for ((d, &yv), &dyv) in dx.iter_mut().zip(y).zip(dy) {
                *d = yv * (dyv - dot);
            }
        }
        vec![Some(g)]
    }
}

struct CrossEntropyBack {
    labels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for CrossEntropyBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let logits = inputs[0];
        let k = logits.last_dim();
        let probs = softmax_lastdim(logits);
        let scale = grad[0] / T::of(self.labels.len() as f64);
        let mut g = probs.into_data();
        for (row, &label) in g.chunks_mut(k).zip(&self.labels) {
            row[label] -= T::one();
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        vec![Some(g)]
    }
}

// ── graph ops ────────────────────────────────────────────────────────

impl<T: Scalar> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let (m, k) = dims2("matmul", self.value(a))?;
        let n = value.shape()[1];
        Ok(self.record(value, &[a, b], MatmulBack { m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = transpose(self.value(a))?;
        let (rows, cols) = (value.shape()[1], value.shape()[0]);
        Ok(self.record(value, &[a], TransposeBack { rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(value, &[a, b], AddBack))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(value, &[a, b], SubBack))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(value, &[a, b], MulBack))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.record(value, &[a], ScaleBack(factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let len = self.value(a).len();
        let value = Tensor::scalar(self.value(a).sum());
        self.record(value, &[a], SumBack { len, factor: 1.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let len = self.value(a).len();
        let value = Tensor::scalar(self.value(a).sum() / T::of(len as f64));
        self.record(value, &[a], SumBack { len, factor: 1.0 / len as f64 })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.record(value, &[a], ReshapeBack))
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_lastdim(&values)?;
        let widths = values.iter().map(|v| v.last_dim()).collect();
        Ok(self.record(value, parts, ConcatBack { widths }))
    }

    pub fn slice_lastdim(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = slice_lastdim(self.value(a), start, len)?;
        let width = self.value(a).last_dim();
        Ok(self.record(value, &[a], SliceBack { start, len, width }))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let value = softmax_lastdim(self.value(a));
        self.record(value, &[a], SoftmaxBack)
    }

    /// Mean cross-entropy of `logits[P×K]` against `labels`, as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = cross_entropy(self.value(logits), labels)?;
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            CrossEntropyBack {
                labels: labels.to_vec(),
            },
        ))
    }
}
