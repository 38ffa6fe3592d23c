use std::rc::Rc;

use super::kernels::{gelu, gelu_grad, gemm, gemm_nt, gemm_tn, transpose};
use super::{Element, Rng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// Tanh approximation `0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
    Gelu,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::Parse(format!("unknown activation `{s}`"))),
        }
    }
}

pub(crate) enum Op<T: Element> {
    MatMul(Tensor<T>, Tensor<T>),
    Transpose(Tensor<T>),
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    AddRowBias(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    Sum(Tensor<T>),
    Softmax(Tensor<T>),
    LayerNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Activation(Tensor<T>, Activation),
    /// Per-element multiplier: 0 for dropped, 1/(1-p) for kept.
    Dropout(Tensor<T>, Vec<T>),
    Embedding(Tensor<T>, Vec<usize>),
    CrossEntropy {
        logits: Tensor<T>,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SliceCols {
        x: Tensor<T>,
        start: usize,
    },
    ConcatCols(Vec<Tensor<T>>),
    ConcatRows(Vec<Tensor<T>>),
    SelectRows(Tensor<T>, Vec<usize>),
    MaskRows(Tensor<T>, Rc<[bool]>),
    Reshape(Tensor<T>),
}

impl<T: Element> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddRowBias(x, b) => vec![x, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.iter().collect(),
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Softmax(x)
            | Op::Activation(x, _)
            | Op::Dropout(x, _)
            | Op::Embedding(x, _)
            | Op::SelectRows(x, _)
            | Op::MaskRows(x, _)
            | Op::Reshape(x) => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::SliceCols { x, .. } => vec![x],
        }
    }

    /// Emits `(input, dL/dinput)` for every input that requires a gradient.
    /// `out` is this op's forward value and `g` is `dL/dout`.
    pub(crate) fn backward(&self, out: &[T], g: &[T], emit: &mut dyn FnMut(&Tensor<T>, Vec<T>)) {
        let want = |t: &Tensor<T>| t.requires_grad();
        match self {
            Op::MatMul(a, b) => {
                let (m, k) = a.dims2().unwrap();
                let n = b.dims2().unwrap().1;
                if want(a) {
                    emit(a, gemm_nt(g, &b.data(), m, n, k));
                }
                if want(b) {
                    emit(b, gemm_tn(&a.data(), g, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = x.dims2().unwrap();
                emit(x, transpose(g, c, r));
            }
            Op::Add(a, b) => {
                if want(a) {
                    emit(a, g.to_vec());
                }
                if want(b) {
                    emit(b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    emit(a, g.to_vec());
                }
                if want(b) {
                    emit(b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    emit(a, g.iter().zip(b.data().iter()).map(|(&g, &b)| g * b).collect());
                }
                if want(b) {
                    emit(b, g.iter().zip(a.data().iter()).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::AddRowBias(x, b) => {
                if want(x) {
                    emit(x, g.to_vec());
                }
                if want(b) {
                    let n = b.len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    emit(b, db);
                }
            }
            Op::Scale(x, s) => emit(x, g.iter().map(|&v| v * *s).collect()),
            Op::Sum(x) => emit(x, vec![g[0]; x.len()]),
            Op::Softmax(x) => {
                let n = last_dim(x);
                let mut dx = vec![T::zero(); out.len()];
                for ((drow, yrow), grow) in dx
                    .chunks_exact_mut(n)
                    .zip(out.chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let dot: T = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                    for ((d, &y), &g) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = y * (g - dot);
                    }
                }
                emit(x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = gamma.len();
                let gam = gamma.data();
                if want(gamma) {
                    let mut dg = vec![T::zero(); n];
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((d, &gv), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                    emit(gamma, dg);
                }
                if want(beta) {
                    let mut db = vec![T::zero(); n];
                    for grow in g.chunks_exact(n) {
                        db.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                    }
                    emit(beta, db);
                }
                if want(x) {
                    let nf = T::cast(n as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((drow, grow), hrow)) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        let mut sum_gy = T::zero();
                        let mut sum_gyh = T::zero();
                        for i in 0..n {
                            let gy = grow[i] * gam[i];
                            sum_gy += gy;
                            sum_gyh += gy * hrow[i];
                        }
                        let k = inv_std[r] / nf;
                        for i in 0..n {
                            let gy = grow[i] * gam[i];
                            drow[i] = k * (nf * gy - sum_gy - hrow[i] * sum_gyh);
                        }
                    }
                    emit(x, dx);
                }
            }
            Op::Activation(x, kind) => {
                let xd = x.data();
                let dx = match kind {
                    Activation::Gelu => g.iter().zip(xd.iter()).map(|(&g, &x)| g * gelu_grad(x)).collect(),
                    Activation::Relu => g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                };
                emit(x, dx);
            }
            Op::Dropout(x, keep) => emit(x, g.iter().zip(keep).map(|(&g, &k)| g * k).collect()),
            Op::Embedding(table, ids) => {
                let d = last_dim(table);
                let mut dt = vec![T::zero(); table.len()];
                for (row, &id) in g.chunks_exact(d).zip(ids) {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, &v)| *a += v);
                }
                emit(table, dt);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = last_dim(logits);
                let scale = g[0] / T::cast(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (b, &label) in labels.iter().enumerate() {
                    dl[b * c + label] -= scale;
                }
                emit(logits, dl);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = x.dims2().unwrap();
                let width = g.len() / rows;
                let mut dx = vec![T::zero(); rows * cols];
                for (r, grow) in g.chunks_exact(width).enumerate() {
                    dx[r * cols + start..r * cols + start + width].copy_from_slice(grow);
                }
                emit(x, dx);
            }
            Op::ConcatCols(xs) => {
                let total: usize = xs.iter().map(last_dim).sum();
                let mut offset = 0;
                for x in xs {
                    let w = last_dim(x);
                    if want(x) {
                        let dx = g
                            .chunks_exact(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        emit(x, dx);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let n = x.len();
                    if want(x) {
                        emit(x, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SelectRows(x, rows) => {
                let cols = last_dim(x);
                let mut dx = vec![T::zero(); x.len()];
                for (grow, &r) in g.chunks_exact(cols).zip(rows) {
                    dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(a, &v)| *a += v);
                }
                emit(x, dx);
            }
            Op::MaskRows(x, mask) => {
                let cols = last_dim(x);
                let mut dx = g.to_vec();
                for (row, &keep) in dx.chunks_exact_mut(cols).zip(mask.iter()) {
                    if !keep {
                        row.fill(T::zero());
                    }
                }
                emit(x, dx);
            }
            Op::Reshape(x) => emit(x, g.to_vec()),
        }
    }
}

fn last_dim<T: Element>(t: &Tensor<T>) -> usize {
    *t.shape().last().unwrap()
}

fn shape_err<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Element> Tensor<T> {
    /// `self[m,k] · rhs[k,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(shape_err("matmul", self, rhs));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let out = gemm(&self.data(), &rhs.data(), m, k, n);
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMul(self.clone(), rhs.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = transpose(&self.data(), r, c);
        Ok(Tensor::from_op(out, vec![c, r], Op::Transpose(self.clone())))
    }

    fn zip_with(
        &self,
        rhs: &Tensor<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            return Err(shape_err(name, self, rhs));
        }
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), op))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(rhs, "add", |a, b| a + b, Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(rhs, "sub", |a, b| a - b, Op::Sub(self.clone(), rhs.clone()))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(rhs, "mul", |a, b| a * b, Op::Mul(self.clone(), rhs.clone()))
    }

    /// Adds `bias[n]` to every row of `self[..., n]`.
    pub fn add_row_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let n = last_dim(self);
        if bias.rank() != 1 || bias.len() != n {
            return Err(shape_err("add_row_bias", self, bias));
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b.iter()).for_each(|(o, &v)| *o += v);
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::AddRowBias(self.clone(), bias.clone()),
        ))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(T::one() / T::cast(self.len() as f64))
    }

    /// Softmax over the last dimension, stabilised by subtracting the row max.
    pub fn softmax_lastdim(&self) -> Tensor<T> {
        self.softmax_masked(None)
    }

    /// Softmax over the last dimension where columns with `mask[j] == false`
    /// are treated as `-inf` scores and receive probability exactly 0.
    /// Every row must keep at least one column.
    pub fn softmax_masked(&self, mask: Option<&[bool]>) -> Tensor<T> {
        let n = last_dim(self);
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { (*v - max).exp() } else { T::zero() };
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Tensor::from_op(out, self.shape().to_vec(), Op::Softmax(self.clone()))
    }

    /// `gamma ⊙ (x − mean) / √(var + eps) + beta` over the last dimension,
    /// with the population variance.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let n = last_dim(self);
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(shape_err("layer_norm", self, gamma));
        }
        let nf = T::cast(n as f64);
        let eps = T::cast(eps);
        let x = self.data();
        let (g, b) = (gamma.data(), beta.data());
        let rows = x.len() / n;
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            let mean = xr.iter().copied().sum::<T>() / nf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for i in 0..n {
                let h = (xr[i] - mean) * is;
                xhat[r * n + i] = h;
                out[r * n + i] = g[i] * h + b[i];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    pub fn activation(&self, kind: Activation) -> Tensor<T> {
        let out = match kind {
            Activation::Gelu => self.data().iter().map(|&v| gelu(v)).collect(),
            Activation::Relu => self.data().iter().map(|&v| v.max(T::zero())).collect(),
        };
        Tensor::from_op(out, self.shape().to_vec(), Op::Activation(self.clone(), kind))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1−p)`; otherwise the identity.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut Rng) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let kept = T::cast(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.len())
            .map(|_| if rng.uniform() < p { T::zero() } else { kept })
            .collect();
        let out = self.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Dropout(self.clone(), keep)))
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2()?;
        if width == 0 || start + width > cols {
            return Err(Error::Param(format!(
                "column slice {start}..{} out of range for width {cols}",
                start + width
            )));
        }
        let x = self.data();
        let out: Vec<T> = x
            .chunks_exact(cols)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        drop(x);
        Ok(Tensor::from_op(
            out,
            vec![rows, width],
            Op::SliceCols {
                x: self.clone(),
                start,
            },
        ))
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat_cols of nothing".into()))?;
        let rows = first.dims2()?.0;
        for p in parts {
            if p.dims2()?.0 != rows {
                return Err(shape_err("concat_cols", first, p));
            }
        }
        let total: usize = parts.iter().map(last_dim).sum();
        let mut out = Vec::with_capacity(rows * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for r in 0..rows {
            for (p, d) in parts.iter().zip(&datas) {
                let w = last_dim(p);
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        drop(datas);
        Ok(Tensor::from_op(out, vec![rows, total], Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical concatenation of rank-2 tensors with equal column counts.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat_rows of nothing".into()))?;
        let cols = first.dims2()?.1;
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(shape_err("concat_rows", first, p));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        Ok(Tensor::from_op(out, vec![rows, cols], Op::ConcatRows(parts.to_vec())))
    }

    /// Gathers rows of a rank-2 tensor (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor<T>> {
        let (n, cols) = self.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Param(format!("row {bad} out of range for {n} rows")));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&x[r * cols..(r + 1) * cols]);
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            vec![rows.len(), cols],
            Op::SelectRows(self.clone(), rows.to_vec()),
        ))
    }

    /// Zeroes every row whose mask entry is false.
    pub fn mask_rows(&self, mask: &[bool]) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2()?;
        if mask.len() != rows {
            return Err(Error::Param(format!(
                "row mask of length {} for {rows} rows",
                mask.len()
            )));
        }
        let mut out = self.to_vec();
        for (row, &keep) in out.chunks_exact_mut(cols).zip(mask) {
            if !keep {
                row.fill(T::zero());
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![rows, cols],
            Op::MaskRows(self.clone(), mask.into()),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        super::validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }
}

/// Rows of `table[V, D]` selected by `ids`, giving `[len(ids), D]`.
pub fn embedding_lookup<T: Element>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (vocab, d) = table.dims2()?;
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::OutOfVocab { id, vocab });
    }
    if ids.is_empty() {
        return Err(Error::Param("embedding lookup of an empty sequence".into()));
    }
    let t = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        out.extend_from_slice(&t[id * d..(id + 1) * d]);
    }
    drop(t);
    Ok(Tensor::from_op(
        out,
        vec![ids.len(), d],
        Op::Embedding(table.clone(), ids.to_vec()),
    ))
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy_mean<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Param(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let x = logits.data();
    let mut probs = vec![T::zero(); b * c];
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &x[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + total.ln();
        for j in 0..c {
            probs[r * c + j] = (row[j] - log_z).exp();
        }
        loss += log_z - row[label];
    }
    drop(x);
    let loss = loss / T::cast(b as f64);
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        Op::CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
        },
    ))
}
