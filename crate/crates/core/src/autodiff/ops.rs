use rand::Rng;

use super::kernels::{self, gemm, Strided};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::select::top_m_indices;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.precision(),
            m,
            k,
            n,
            1.0,
            Strided::rows(self.value(a).data(), k),
            Strided::rows(self.value(b).data(), n),
            0.0,
            &mut out,
            n,
            1,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose { a }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(a).rows_cols();
        if self.value(bias).numel() != cols {
            return Err(Error::shape("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::AddBias { a, bias }, &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= c);
        self.push(value, Op::Scale { a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x += c);
        self.push(value, Op::AddScalar { a }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x = kernels::gelu(*x));
        self.push(value, Op::Gelu { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let (_, cols) = value.rows_cols();
        kernels::softmax_rows(value.data_mut(), cols);
        self.push(value, Op::Softmax { a }, &[a])
    }

    /// LayerNorm over the last axis with a learnable gain and no bias. The
    /// gain has either one entry per feature or a single shared entry.
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        let gn = self.value(gain).numel();
        if gn != cols && gn != 1 {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let src = self.value(x).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mu) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * if gn == 1 { g[0] } else { g[c] };
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, xhat, rstd }, &[x, gain]))
    }

    /// Causal depthwise 1-D convolution along the sequence axis.
    ///
    /// `x` is `[batch * seq_len, channels]` with sequences stored contiguously;
    /// `kernel` is `[width, channels]` where tap `s` multiplies the input `s`
    /// positions back. Taps never cross a sequence boundary.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, seq_len: usize) -> Result<Var> {
        let (rows, ch) = matrix_dims("causal_conv", self.value(x))?;
        let (width, ch2) = matrix_dims("causal_conv", self.value(kernel))?;
        if ch != ch2 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("causal_conv", self.shape(x), self.shape(kernel)));
        }
        let src = self.value(x).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; rows * ch];
        for t in 0..rows {
            let pos = t % seq_len;
            for s in 0..width.min(pos + 1) {
                let from = &src[(t - s) * ch..(t - s + 1) * ch];
                let taps = &k[s * ch..(s + 1) * ch];
                let dst = &mut out[t * ch..(t + 1) * ch];
                for c in 0..ch {
                    dst[c] += taps[c] * from[c];
                }
            }
        }
        let value = Tensor::new(&[rows, ch], out)?;
        Ok(self.push(value, Op::CausalConv { x, kernel, seq_len }, &[x, kernel]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = matrix_dims("gather_rows", self.value(x))?;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Bounds {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let value = Tensor::new(&[idx.len(), cols], out)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// `out[idx[r]] += src[r]` into a zero `[rows, cols]` matrix.
    pub fn scatter_add_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, cols) = matrix_dims("scatter_add_rows", self.value(src))?;
        if n != idx.len() {
            return Err(Error::shape("scatter_add_rows", self.shape(src), &[idx.len()]));
        }
        let mut out = vec![0.0; rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::Bounds {
                    op: "scatter_add_rows",
                    index: i,
                    len: rows,
                });
            }
            let from = self.value(src).row(r);
            out[i * cols..(i + 1) * cols]
                .iter_mut()
                .zip(from)
                .for_each(|(o, v)| *o += v);
        }
        let value = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(value, Op::ScatterAddRows { src, idx: idx.to_vec() }, &[src]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("slice_rows", self.value(a))?;
        if start + len > rows {
            return Err(Error::Bounds {
                op: "slice_rows",
                index: start + len,
                len: rows,
            });
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(&[len, cols], data)?;
        Ok(self.push(value, Op::SliceRows { a, start }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::arg("concat_rows of nothing"))?;
        let (_, cols) = matrix_dims("concat_rows", self.value(*first))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = matrix_dims("concat_rows", self.value(*p))?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), self.shape(*p)));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Multiplies row `r` of `x` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims("scale_rows", self.value(x))?;
        if self.value(s).numel() != rows {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .zip(sv)
            .flat_map(|(row, w)| row.iter().map(move |v| v * w))
            .collect();
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(value, Op::ScaleRows { x, s }, &[x, s]))
    }

    /// Column sums: `[rows, cols] -> [1, cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = matrix_dims("sum_rows", self.value(a))?;
        let mut out = vec![0.0; cols];
        for row in self.value(a).data().chunks(cols) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let value = Tensor::new(&[1, cols], out)?;
        Ok(self.push(value, Op::SumRows { a }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// The `m` largest entries of a vector, best first, with their indices.
    /// Gradient flows to the selected entries only.
    pub fn top_m(&mut self, a: Var, m: usize) -> Result<(Var, Vec<usize>)> {
        let src = self.value(a);
        if src.ndim() > 1 && src.rows_cols().0 != 1 {
            return Err(Error::shape("top_m", src.shape(), &[src.numel()]));
        }
        let idx = top_m_indices(src.data(), m)?;
        let vals = idx.iter().map(|&i| src.data()[i]).collect();
        let var = self.push(Tensor::vector(vals), Op::TopM { a, idx: idx.clone() }, &[a]);
        Ok((var, idx))
    }

    /// Mean next-token cross-entropy of `[rows, vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = matrix_dims("cross_entropy", self.value(logits))?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Bounds {
                    op: "cross_entropy",
                    index: t,
                    len: vocab,
                });
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        loss /= rows as f64;
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Rotary position encoding on `[batch * seq_len, heads * head_dim]`.
    pub fn rope(&mut self, a: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("rope", self.value(a))?;
        if heads == 0 || cols % heads != 0 || (cols / heads) % 2 != 0 || rows % seq_len != 0 {
            return Err(Error::shape("rope", self.shape(a), &[seq_len, heads]));
        }
        let mut out = self.value(a).data().to_vec();
        rotate(&mut out, rows, cols, seq_len, heads, 1.0);
        let value = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(value, Op::Rope { a, seq_len, heads }, &[a]))
    }

    /// Causal multi-head scaled dot-product attention. All operands are
    /// `[batch * seq_len, heads * head_dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("attention", self.value(q))?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || cols % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("attention", self.shape(q), &[seq_len, heads]));
        }
        let dh = cols / heads;
        let batch = rows / seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let prec = self.precision();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * cols];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq_len * cols + h * dh;
                let p = &mut probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                gemm(
                    prec,
                    seq_len,
                    dh,
                    seq_len,
                    scale,
                    Strided::rows(qd, cols).offset(base),
                    Strided::transposed(kd, cols).offset(base),
                    0.0,
                    p,
                    seq_len,
                    1,
                );
                for i in 0..seq_len {
                    let row = &mut p[i * seq_len..(i + 1) * seq_len];
                    for x in row[i + 1..].iter_mut() {
                        *x = 0.0;
                    }
                    kernels::softmax_rows(&mut row[..=i], i + 1);
                }
                gemm(
                    prec,
                    seq_len,
                    seq_len,
                    dh,
                    1.0,
                    Strided::rows(p, seq_len),
                    Strided::rows(vd, cols).offset(base),
                    0.0,
                    &mut out[base..],
                    cols,
                    1,
                );
            }
        }
        let value = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().zip(&mask).for_each(|(x, m)| *x *= m);
        self.push(value, Op::Dropout { a, mask }, &[a])
    }
}

/// Applies the rotary rotation in place; `direction` -1 applies the inverse.
pub(crate) fn rotate(buf: &mut [f64], rows: usize, cols: usize, seq_len: usize, heads: usize, direction: f64) {
    let dh = cols / heads;
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / dh as f64))
        .collect();
    for r in 0..rows {
        let pos = (r % seq_len) as f64;
        for h in 0..heads {
            for (i, f) in freqs.iter().enumerate() {
                let (s, c) = (pos * f * direction).sin_cos();
                let at = r * cols + h * dh + 2 * i;
                let (x0, x1) = (buf[at], buf[at + 1]);
                buf[at] = x0 * c - x1 * s;
                buf[at + 1] = x0 * s + x1 * c;
            }
        }
    }
}
