//! Fused operators for sparse memory layers.

use super::kernels::{gemm, Strided};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::tensor::Tensor;

/// Value and gradient of the singular-value margin penalty on an `r x r` core.
pub fn aux_loss_value_grad(core: &[f64], r: usize, alpha: f64, tau: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; r * r];
    if r < 2 {
        return (0.0, grad);
    }
    let f = svd(core, r);
    let w = alpha / (r - 1) as f64;
    let mut value = 0.0;
    for k in 1..r {
        let excess = (f.s[k] - tau).max(0.0);
        if excess == 0.0 {
            continue;
        }
        value += w * excess * excess;
        for i in 0..r {
            for j in 0..r {
                grad[i * r + j] += w * 2.0 * excess * f.u[k][i] * f.t[k][j];
            }
        }
    }
    (value, grad)
}

impl Graph {
    /// Per-rank query-key scores.
    ///
    /// `q` is `[T, D_k]` and `keys` is `[n, D_k]`; both are split into `rank`
    /// equal slices along `D_k`. The result is `[T, rank * n]` where column
    /// `a * n + i` holds the slice-`a` dot product of the query with key `i`.
    pub fn rank_scores(&mut self, q: Var, keys: Var, rank: usize) -> Result<Var> {
        let (t, dk) = self.value(q).rows_cols();
        let (n, dk2) = self.value(keys).rows_cols();
        if dk != dk2 {
            return Err(Error::shape("rank_scores", self.shape(q), self.shape(keys)));
        }
        if rank == 0 || dk % rank != 0 {
            return Err(Error::config(format!(
                "key dimension {dk} is not divisible by tucker rank {rank}"
            )));
        }
        let w = dk / rank;
        let cols = rank * n;
        let mut out = vec![0.0; t * cols];
        for a in 0..rank {
            gemm(
                self.precision(),
                t,
                w,
                n,
                1.0,
                Strided::rows(self.value(q).data(), dk).offset(a * w),
                Strided::transposed(self.value(keys).data(), dk).offset(a * w),
                0.0,
                &mut out[a * n..],
                cols,
                1,
            );
        }
        let value = Tensor::new(&[t, cols], out)?;
        Ok(self.push(value, Op::RankScores { q, keys, rank }, &[q, keys]))
    }

    /// Exact bilinear scores of selected grid cells.
    ///
    /// `row` and `col` are `[T, rank * side]` rank scores, `core` is
    /// `rank x rank`, and `cells` lists `m` cells `(i, j)` per token, token by
    /// token. Output `[T, m]` holds `S_row[:, i]^T C S_col[:, j]`.
    pub fn bilinear_cells(
        &mut self,
        row: Var,
        col: Var,
        core: Var,
        rank: usize,
        cells: &[(usize, usize)],
    ) -> Result<Var> {
        let (t, width) = self.value(row).rows_cols();
        if self.shape(col) != self.shape(row) || width % rank != 0 {
            return Err(Error::shape("bilinear_cells", self.shape(row), self.shape(col)));
        }
        if self.value(core).numel() != rank * rank {
            return Err(Error::shape("bilinear_cells", self.shape(core), &[rank, rank]));
        }
        let m = cells_per_token("bilinear_cells", cells.len(), t)?;
        let side = width / rank;
        let (rd, cd, c) = (self.value(row).data(), self.value(col).data(), self.value(core).data());
        let mut out = vec![0.0; t * m];
        for (k, &(i, j)) in cells.iter().enumerate() {
            check_cell("bilinear_cells", i, j, side)?;
            let tok = k / m;
            let mut s = 0.0;
            for a in 0..rank {
                let ra = rd[tok * width + a * side + i];
                let mut inner = 0.0;
                for b in 0..rank {
                    inner += c[a * rank + b] * cd[tok * width + b * side + j];
                }
                s += ra * inner;
            }
            out[k] = s;
        }
        let value = Tensor::new(&[t, m], out)?;
        Ok(self.push(
            value,
            Op::BilinearCells {
                row,
                col,
                core,
                rank,
                side,
                cells: cells.to_vec(),
            },
            &[row, col, core],
        ))
    }

    /// Additive product-key scores `s_row[i] + s_col[j]` of selected cells.
    pub fn additive_cells(&mut self, row: Var, col: Var, cells: &[(usize, usize)]) -> Result<Var> {
        let (t, side) = self.value(row).rows_cols();
        if self.shape(col) != self.shape(row) {
            return Err(Error::shape("additive_cells", self.shape(row), self.shape(col)));
        }
        let m = cells_per_token("additive_cells", cells.len(), t)?;
        let (rd, cd) = (self.value(row).data(), self.value(col).data());
        let mut out = vec![0.0; t * m];
        for (k, &(i, j)) in cells.iter().enumerate() {
            check_cell("additive_cells", i, j, side)?;
            let tok = k / m;
            out[k] = rd[tok * side + i] + cd[tok * side + j];
        }
        let value = Tensor::new(&[t, m], out)?;
        Ok(self.push(
            value,
            Op::AdditiveCells {
                row,
                col,
                side,
                cells: cells.to_vec(),
            },
            &[row, col],
        ))
    }

    /// Score-weighted value pooling grouped by virtual block.
    ///
    /// `scores` holds one `[T, m]` tensor per value chunk; chunk `c` weights
    /// columns `[c * D_v / h, (c + 1) * D_v / h)` of `values` (`[N, D_v]`).
    /// `slots` gives `(physical row, block)` for every selected cell, token by
    /// token. The result is `[T, blocks * D_v]`, block `p` occupying columns
    /// `[p * D_v, (p + 1) * D_v)`.
    pub fn block_pool(
        &mut self,
        scores: &[Var],
        values: Var,
        slots: &[(usize, usize)],
        blocks: usize,
    ) -> Result<Var> {
        let h = scores.len();
        let (rows, dv) = self.value(values).rows_cols();
        if h == 0 || dv % h != 0 {
            return Err(Error::config(format!(
                "value dimension {dv} is not divisible by core count {h}"
            )));
        }
        let (t, m) = self.value(scores[0]).rows_cols();
        for s in scores {
            if self.shape(*s) != self.shape(scores[0]) {
                return Err(Error::shape("block_pool", self.shape(scores[0]), self.shape(*s)));
            }
        }
        if slots.len() != t * m {
            return Err(Error::shape("block_pool", self.shape(scores[0]), &[slots.len()]));
        }
        let chunk = dv / h;
        let width = blocks * dv;
        let vd = self.value(values).data();
        let mut out = vec![0.0; t * width];
        for (k, &(phys, p)) in slots.iter().enumerate() {
            if phys >= rows {
                return Err(Error::Bounds {
                    op: "block_pool",
                    index: phys,
                    len: rows,
                });
            }
            if p >= blocks {
                return Err(Error::Bounds {
                    op: "block_pool",
                    index: p,
                    len: blocks,
                });
            }
            let tok = k / m;
            let dst = &mut out[tok * width + p * dv..tok * width + (p + 1) * dv];
            let src = &vd[phys * dv..(phys + 1) * dv];
            for (c, s) in scores.iter().enumerate() {
                let w = self.nodes[s.0].value.data()[k];
                let range = c * chunk..(c + 1) * chunk;
                dst[range.clone()]
                    .iter_mut()
                    .zip(&src[range])
                    .for_each(|(o, v)| *o += w * v);
            }
        }
        let value = Tensor::new(&[t, width], out)?;
        let mut inputs = scores.to_vec();
        inputs.push(values);
        Ok(self.push(
            value,
            Op::BlockPool {
                scores: scores.to_vec(),
                values,
                slots: slots.to_vec(),
                blocks,
            },
            &inputs,
        ))
    }

    /// Singular-value margin penalty `alpha/(r-1) * sum_{i>=2} max(0, s_i - tau)^2`
    /// on a square core.
    pub fn aux_loss(&mut self, core: Var, alpha: f64, tau: f64) -> Result<Var> {
        let n = self.value(core).numel();
        let r = (n as f64).sqrt().round() as usize;
        if r * r != n {
            return Err(Error::shape("aux_loss", self.shape(core), &[r, r]));
        }
        let (value, dcore) = aux_loss_value_grad(self.value(core).data(), r, alpha, tau);
        Ok(self.push(Tensor::scalar(value), Op::AuxLoss { core, dcore }, &[core]))
    }
}

fn cells_per_token(op: &'static str, cells: usize, tokens: usize) -> Result<usize> {
    if tokens == 0 || cells % tokens != 0 {
        return Err(Error::shape(op, &[cells], &[tokens]));
    }
    Ok(cells / tokens)
}

fn check_cell(op: &'static str, i: usize, j: usize, side: usize) -> Result<()> {
    let worst = i.max(j);
    if worst >= side {
        return Err(Error::Bounds {
            op,
            index: worst,
            len: side,
        });
    }
    Ok(())
}
