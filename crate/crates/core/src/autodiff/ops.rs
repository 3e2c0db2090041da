//! Forward rules. Every op validates shapes up front and rejects non-finite
//! results, so a NaN is reported at the op that produced it.

use std::sync::Arc;

use super::tape::{gelu_constants, Activation, BinaryKind, Broadcast, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn finite<S: Scalar>(t: Tensor<S>, op: &'static str) -> Result<Tensor<S>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_tape<S: Scalar>(a: &Var<'_, S>, b: &Var<'_, S>, op: &'static str) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{op}: operands on different tapes")))
    }
}

fn is_row_of(row: &Tensor<impl Scalar>, full: &Tensor<impl Scalar>) -> bool {
    let (r, c) = row.dims2();
    r == 1 && row.rank() <= 2 && full.rank() == 2 && c == full.dims2().1
}

impl<'t, S: Scalar> Var<'t, S> {
    fn unary_grad(&self, others: &[&Var<'t, S>]) -> bool {
        self.requires_grad() || others.iter().any(|o| o.requires_grad())
    }

    /// `[m x k] * [k x n]`.
    pub fn matmul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        same_tape(self, other, "matmul")?;
        let (a, b) = (self.borrow_value(), other.borrow_value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("rank-2 operands required, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        let out = a.matmul(&b)?;
        drop((a, b));
        let out = finite(out, "matmul")?;
        let rg = self.unary_grad(&[other]);
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn elementwise(&self, other: &Var<'t, S>, kind: BinaryKind) -> Result<Var<'t, S>> {
        same_tape(self, other, "elementwise")?;
        let (a, b) = (self.borrow_value(), other.borrow_value());
        let bcast = if a.shape() == b.shape() {
            Broadcast::Same
        } else if b.len() == 1 {
            Broadcast::ScalarRhs
        } else if a.len() == 1 {
            Broadcast::ScalarLhs
        } else if is_row_of(&b, &a) {
            Broadcast::RowRhs
        } else if is_row_of(&a, &b) {
            Broadcast::RowLhs
        } else {
            return Err(Error::dim(
                "elementwise",
                format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
            ));
        };
        let (big, shape) = match bcast {
            Broadcast::ScalarLhs | Broadcast::RowLhs => (&*b, b.shape().to_vec()),
            _ => (&*a, a.shape().to_vec()),
        };
        let len = big.len();
        let cols = big.dims2().1.max(1);
        let ad = a.data();
        let bd = b.data();
        let pick = |d: &[S], i: usize, lhs: bool| -> S {
            match (bcast, lhs) {
                (Broadcast::ScalarLhs, true) | (Broadcast::ScalarRhs, false) => d[0],
                (Broadcast::RowLhs, true) | (Broadcast::RowRhs, false) => d[i % cols],
                _ => d[i],
            }
        };
        let data: Vec<S> = (0..len)
            .map(|i| {
                let (x, y) = (pick(ad, i, true), pick(bd, i, false));
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        drop((a, b));
        let out = finite(Tensor::new(shape, data)?, "elementwise")?;
        let rg = self.unary_grad(&[other]);
        Ok(self.tape.push(
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                bcast,
            },
            rg,
        ))
    }

    pub fn add(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.elementwise(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.elementwise(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.elementwise(other, BinaryKind::Mul)
    }

    pub fn scale(&self, factor: S) -> Result<Var<'t, S>> {
        let out = finite(self.borrow_value().map(|x| x * factor), "scale")?;
        Ok(self.tape.push(out, Op::Scale { x: self.id, factor }, self.requires_grad()))
    }

    pub fn neg(&self) -> Result<Var<'t, S>> {
        self.scale(-S::one())
    }

    pub fn activation(&self, kind: Activation) -> Result<Var<'t, S>> {
        let x = self.borrow_value();
        if kind == Activation::Log {
            if let Some(bad) = x.data().iter().find(|&&v| v <= S::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let (c, a) = gelu_constants::<S>();
        let half = S::lit(0.5);
        let out = x.map(|v| match kind {
            Activation::Sigmoid => sigmoid(v),
            Activation::Relu => v.max(S::zero()),
            Activation::Gelu => half * v * (S::one() + (c * (v + a * v * v * v)).tanh()),
            Activation::Exp => v.exp(),
            Activation::Log => v.ln(),
        });
        drop(x);
        let out = finite(out, "activation")?;
        Ok(self
            .tape
            .push(out, Op::Unary { x: self.id, kind }, self.requires_grad()))
    }

    pub fn sigmoid(&self) -> Result<Var<'t, S>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn relu(&self) -> Result<Var<'t, S>> {
        self.activation(Activation::Relu)
    }

    pub fn gelu(&self) -> Result<Var<'t, S>> {
        self.activation(Activation::Gelu)
    }

    pub fn exp(&self) -> Result<Var<'t, S>> {
        self.activation(Activation::Exp)
    }

    pub fn ln(&self) -> Result<Var<'t, S>> {
        self.activation(Activation::Log)
    }

    /// Sum of absolute values.
    pub fn l1_norm(&self) -> Result<Var<'t, S>> {
        let v = self.borrow_value().data().iter().map(|x| x.abs()).sum();
        let out = finite(Tensor::scalar(v), "l1_norm")?;
        Ok(self.tape.push(out, Op::L1 { x: self.id }, self.requires_grad()))
    }

    pub fn sum(&self) -> Result<Var<'t, S>> {
        let v = self.borrow_value().data().iter().copied().sum();
        let out = finite(Tensor::scalar(v), "sum")?;
        Ok(self.tape.push(out, Op::Sum { x: self.id }, self.requires_grad()))
    }

    pub fn mean(&self) -> Result<Var<'t, S>> {
        let x = self.borrow_value();
        if x.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let v = x.data().iter().copied().sum::<S>() / S::lit(x.len() as f64);
        drop(x);
        let out = finite(Tensor::scalar(v), "mean")?;
        Ok(self.tape.push(out, Op::Mean { x: self.id }, self.requires_grad()))
    }

    /// Row-wise `softmax(x / temperature)`, computed with max subtraction.
    pub fn softmax(&self, temperature: S) -> Result<Var<'t, S>> {
        let inv_temp = inverse_temperature(temperature)?;
        let x = self.borrow_value();
        let (_, cols) = x.dims2();
        if cols == 0 {
            return Err(Error::dim("softmax", "empty rows"));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row, inv_temp);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        drop(x);
        let out = finite(out, "softmax")?;
        Ok(self.tape.push(
            out,
            Op::SoftmaxRows {
                x: self.id,
                inv_temp,
            },
            self.requires_grad(),
        ))
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax(&self, temperature: S) -> Result<Var<'t, S>> {
        let inv_temp = inverse_temperature(temperature)?;
        let x = self.borrow_value();
        let (_, cols) = x.dims2();
        if cols == 0 {
            return Err(Error::dim("log_softmax", "empty rows"));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b)) * inv_temp;
            let lse = row
                .iter()
                .map(|&v| (v * inv_temp - m).exp())
                .sum::<S>()
                .ln()
                + m;
            row.iter_mut().for_each(|v| *v = *v * inv_temp - lse);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        drop(x);
        let out = finite(out, "log_softmax")?;
        Ok(self.tape.push(
            out,
            Op::LogSoftmaxRows {
                x: self.id,
                inv_temp,
            },
            self.requires_grad(),
        ))
    }

    /// Row-wise layer normalization followed by `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, S>, beta: &Var<'t, S>) -> Result<Var<'t, S>> {
        same_tape(self, gamma, "layer_norm")?;
        same_tape(self, beta, "layer_norm")?;
        let x = self.borrow_value();
        let (rows, cols) = x.dims2();
        let (gv, bv) = (gamma.borrow_value(), beta.borrow_value());
        if gv.len() != cols || bv.len() != cols {
            return Err(Error::dim(
                "layer_norm",
                format!("width {cols} vs affine {} / {}", gv.len(), bv.len()),
            ));
        }
        let n = S::lit(cols as f64);
        let eps = S::lit(LAYER_NORM_EPS);
        let mut xhat = vec![S::zero(); rows * cols];
        let mut inv_std = vec![S::zero(); rows];
        let mut data = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = x.row(r);
            let mu = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mu) * is;
                xhat[r * cols + j] = h;
                data[r * cols + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        drop((x, gv, bv));
        let out = finite(out, "layer_norm")?;
        let rg = self.unary_grad(&[gamma, beta]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no operands"))?;
        let cols = first.borrow_value().dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            same_tape(first, p, "concat_rows")?;
            let v = p.borrow_value();
            let (r, c) = v.dims2();
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column mismatch {c} vs {cols}"),
                ));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.push(
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }

    /// `out[r] = self[index[r]]`; gradients scatter-add back.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t, S>> {
        let x = self.borrow_value();
        let (rows, cols) = x.dims2();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::Contract(format!(
                    "gather_rows: index {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(x.row(i));
        }
        drop(x);
        let out = Tensor::new(vec![index.len(), cols], data)?;
        Ok(self.tape.push(
            out,
            Op::GatherRows {
                src: self.id,
                index: index.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// `out[r] = self[r, index[r]]`, a rank-1 result.
    pub fn pick(&self, index: &[usize]) -> Result<Var<'t, S>> {
        let x = self.borrow_value();
        let (rows, cols) = x.dims2();
        if index.len() != rows || index.iter().any(|&j| j >= cols) {
            return Err(Error::dim(
                "pick",
                format!("{} indices into {rows}x{cols}", index.len()),
            ));
        }
        let data = index.iter().enumerate().map(|(r, &j)| x.at(r, j)).collect();
        drop(x);
        Ok(self.tape.push(
            Tensor::vector(data),
            Op::Pick {
                x: self.id,
                index: index.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Cosine similarity between matching rows. `other` may be a single row
    /// compared against every row of `self`. Result has one entry per row.
    pub fn cosine_rows(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        same_tape(self, other, "cosine")?;
        let (a, b) = (self.borrow_value(), other.borrow_value());
        let (ra, ca) = a.dims2();
        let (rb, cb) = b.dims2();
        if ca != cb || (rb != ra && rb != 1) {
            return Err(Error::dim(
                "cosine",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let b_broadcast = rb == 1 && ra != 1;
        let mut stats = Vec::with_capacity(ra);
        for r in 0..ra {
            let ar = a.row(r);
            let br = b.row(if b_broadcast { 0 } else { r });
            let na = ar.iter().map(|&x| x * x).sum::<S>().sqrt();
            let nb = br.iter().map(|&x| x * x).sum::<S>().sqrt();
            if na == S::zero() || nb == S::zero() {
                return Err(Error::Degenerate(format!(
                    "cosine of zero-norm vector (row {r})"
                )));
            }
            let dot: S = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            stats.push((dot / (na * nb), na, nb));
        }
        drop((a, b));
        let out = finite(
            Tensor::vector(stats.iter().map(|s| s.0).collect()),
            "cosine",
        )?;
        let rg = self.unary_grad(&[other]);
        Ok(self.tape.push(
            out,
            Op::CosineRows {
                a: self.id,
                b: other.id,
                stats,
                b_broadcast,
            },
            rg,
        ))
    }

    /// Cosine similarity of two vectors, as a scalar.
    pub fn cosine(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let (ra, _) = self.borrow_value().dims2();
        let (rb, _) = other.borrow_value().dims2();
        if ra != 1 || rb != 1 {
            return Err(Error::dim("cosine", "vector operands required"));
        }
        self.cosine_rows(other)?.reshape(&[])
    }

    /// Mean over rows: `[r x d] -> [d]`.
    pub fn mean_rows(&self) -> Result<Var<'t, S>> {
        let x = self.borrow_value();
        let (rows, cols) = x.dims2();
        if rows == 0 {
            return Err(Error::dim("mean_pool", "no rows"));
        }
        let mut data = vec![S::zero(); cols];
        for r in 0..rows {
            for (o, &v) in data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = S::one() / S::lit(rows as f64);
        data.iter_mut().for_each(|v| *v *= inv);
        drop(x);
        Ok(self.tape.push(
            Tensor::vector(data),
            Op::MeanRows { x: self.id },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self
            .tape
            .push(out, Op::Reshape { x: self.id }, self.requires_grad()))
    }

    pub fn transpose(&self) -> Result<Var<'t, S>> {
        let x = self.borrow_value();
        if x.rank() != 2 {
            return Err(Error::dim("transpose", "rank-2 operand required"));
        }
        let (rows, cols) = x.dims2();
        let mut data = vec![S::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = x.at(i, j);
            }
        }
        drop(x);
        let out = Tensor::new(vec![cols, rows], data)?;
        Ok(self
            .tape
            .push(out, Op::Transpose { x: self.id }, self.requires_grad()))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `self`, `k` and `v` are `[seqs * seq_len x d]`; `key_mask[r]` is false
    /// for rows that must never be attended to (padding). Every sequence needs
    /// at least one unmasked key.
    pub fn attention(
        &self,
        k: &Var<'t, S>,
        v: &Var<'t, S>,
        seq_len: usize,
        heads: usize,
        key_mask: Arc<[bool]>,
    ) -> Result<Var<'t, S>> {
        same_tape(self, k, "attention")?;
        same_tape(self, v, "attention")?;
        let (qv, kv, vv) = (self.borrow_value(), k.borrow_value(), v.borrow_value());
        let (rows, d) = qv.dims2();
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::dim("attention", "q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::dim(
                "attention",
                format!("{rows}x{d} with seq_len {seq_len} and {heads} heads"),
            ));
        }
        if key_mask.len() != rows {
            return Err(Error::dim("attention", "key mask length"));
        }
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let seqs = rows / seq_len;
        let n = seq_len;
        let mut probs = vec![S::zero(); seqs * heads * n * n];
        let mut out = vec![S::zero(); rows * d];
        let (q, kk, vd) = (qv.data(), kv.data(), vv.data());
        for s in 0..seqs {
            let base = s * n;
            if !key_mask[base..base + n].iter().any(|&m| m) {
                return Err(Error::Contract(format!(
                    "attention: sequence {s} has no unmasked key"
                )));
            }
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let prow = &mut probs[((s * heads + h) * n + i) * n..][..n];
                    let qi = &q[(base + i) * d + off..][..dh];
                    let mut m = S::neg_infinity();
                    for j in 0..n {
                        if key_mask[base + j] {
                            let kj = &kk[(base + j) * d + off..][..dh];
                            let mut acc = S::zero();
                            for t in 0..dh {
                                acc += qi[t] * kj[t];
                            }
                            prow[j] = acc * scale;
                            m = m.max(prow[j]);
                        }
                    }
                    let mut z = S::zero();
                    for j in 0..n {
                        if key_mask[base + j] {
                            prow[j] = (prow[j] - m).exp();
                            z += prow[j];
                        } else {
                            prow[j] = S::zero();
                        }
                    }
                    let orow = &mut out[(base + i) * d + off..][..dh];
                    for j in 0..n {
                        prow[j] /= z;
                        if prow[j] == S::zero() {
                            continue;
                        }
                        let vj = &vd[(base + j) * d + off..][..dh];
                        for t in 0..dh {
                            orow[t] += prow[j] * vj[t];
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        drop((qv, kv, vv));
        let out = finite(Tensor::new(shape, out)?, "attention")?;
        let rg = self.unary_grad(&[k, v]);
        Ok(self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                seq_len,
                heads,
                key_mask,
                probs,
            },
            rg,
        ))
    }
}

fn inverse_temperature<S: Scalar>(temperature: S) -> Result<S> {
    if !(temperature > S::zero()) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(S::one() / temperature)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S], inv_temp: S) {
    let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut z = S::zero();
    for v in row.iter_mut() {
        *v = ((*v - m) * inv_temp).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Plain (untracked) softmax of `x / temperature`.
pub fn softmax_values<S: Scalar>(x: &[S], temperature: S) -> Result<Vec<S>> {
    if x.is_empty() {
        return Err(Error::dim("softmax", "empty input"));
    }
    let inv = inverse_temperature(temperature)?;
    let mut out = x.to_vec();
    softmax_in_place(&mut out, inv);
    Ok(out)
}

/// Plain (untracked) cosine similarity.
pub fn cosine_values<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return Err(Error::Degenerate("cosine of zero-norm vector".into()));
    }
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok(dot / (na * nb))
}
