//! Product-key retrieval: row/column key scoring, two-phase top-m over the
//! logical grid, and the softmax-weighted baseline pooling.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::select::{rank_order, top_m_indices, top_m_keyed};
use crate::tensor::Tensor;

/// Row and column key tables spanning an `n x n` logical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductKeySet {
    pub k_row: Tensor,
    pub k_col: Tensor,
}

impl ProductKeySet {
    pub fn new(k_row: Tensor, k_col: Tensor) -> Result<Self> {
        if k_row.ndim() != 2 || k_row.shape() != k_col.shape() {
            return Err(Error::shape("product_keys", k_row.shape(), k_col.shape()));
        }
        Ok(Self { k_row, k_col })
    }

    pub fn side(&self) -> usize {
        self.k_row.shape()[0]
    }

    pub fn key_dim(&self) -> usize {
        self.k_row.shape()[1]
    }

    /// Addressable memory size `n^2`.
    pub fn size(&self) -> usize {
        self.side() * self.side()
    }
}

/// The value table `V`, one row per memory slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryValues {
    pub v: Tensor,
}

impl MemoryValues {
    pub fn new(v: Tensor) -> Result<Self> {
        if v.ndim() != 2 {
            return Err(Error::shape("memory_values", v.shape(), &[0, 0]));
        }
        Ok(Self { v })
    }

    pub fn slots(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.v.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub row: usize,
    pub col: usize,
    /// Flat address `n * row + col`.
    pub index: usize,
    pub score: f64,
}

/// Retrieval result, best candidate first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    pub m: usize,
}

impl CandidateSet {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|c| c.index).collect()
    }

    pub fn index_set(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|c| c.index).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|c| c.score).collect()
    }

    /// Keeps the best `m` of `cells` (`(row, col, score)`) on an `n`-wide grid.
    pub(crate) fn from_cells(cells: &[(usize, usize, f64)], side: usize, m: usize) -> Self {
        let keyed: Vec<(f64, usize)> = cells.iter().map(|&(i, j, s)| (s, side * i + j)).collect();
        let entries = top_m_keyed(&keyed, m)
            .into_iter()
            .map(|p| {
                let (row, col, score) = cells[p];
                Candidate {
                    row,
                    col,
                    index: side * row + col,
                    score,
                }
            })
            .collect();
        Self { entries, m }
    }
}

fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = a.rows_cols();
    if a.ndim() != 2 || cols != x.len() {
        return Err(Error::shape("matvec", a.shape(), &[x.len()]));
    }
    Ok((0..rows)
        .map(|r| a.row(r).iter().zip(x).map(|(p, q)| p * q).sum())
        .collect())
}

/// Applies a `[D_i, D_k]` query map to `x`.
pub fn apply_query(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (din, dk) = w.rows_cols();
    if w.ndim() != 2 || din != x.len() {
        return Err(Error::shape("query", w.shape(), &[x.len()]));
    }
    let mut out = vec![0.0; dk];
    for (i, xi) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    Ok(out)
}

/// `(K_row q_row(x), K_col q_col(x))` for `[D_i, D_k]` query maps.
pub fn row_col_scores(
    x: &[f64],
    keys: &ProductKeySet,
    q_row: &Tensor,
    q_col: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let qr = apply_query(q_row, x)?;
    let qc = apply_query(q_col, x)?;
    Ok((matvec(&keys.k_row, &qr)?, matvec(&keys.k_col, &qc)?))
}

/// Top-m over the additive grid `s_row[i] + s_col[j]`, scoring only the
/// `m^2` cells whose row and column both survive their own top-m.
pub fn two_phase_topm(s_row: &[f64], s_col: &[f64], m: usize) -> Result<CandidateSet> {
    let n = s_row.len();
    if s_col.len() != n {
        return Err(Error::shape("two_phase_topm", &[n], &[s_col.len()]));
    }
    if m == 0 || m > n {
        return Err(Error::arg(format!("two-phase top-m requires 1 <= m <= n, got m={m}, n={n}")));
    }
    let rows = top_m_indices(s_row, m)?;
    let cols = top_m_indices(s_col, m)?;
    let mut cells = Vec::with_capacity(m * m);
    for &i in &rows {
        for &j in &cols {
            cells.push((i, j, s_row[i] + s_col[j]));
        }
    }
    Ok(CandidateSet::from_cells(&cells, n, m))
}

/// One retrieval head of the product-key baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PkmHead {
    pub keys: ProductKeySet,
    pub q_row: Tensor,
    pub q_col: Tensor,
}

/// Multi-head product-key memory: per head, two-phase top-m, softmax over
/// the retained scores, weighted sum of the shared values; heads are summed.
pub fn pkm_forward(x: &[f64], heads: &[PkmHead], values: &MemoryValues, m: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; values.dim()];
    for head in heads {
        if head.keys.size() != values.slots() {
            return Err(Error::shape("pkm_forward", &[head.keys.size()], values.v.shape()));
        }
        let (sr, sc) = row_col_scores(x, &head.keys, &head.q_row, &head.q_col)?;
        let cands = two_phase_topm(&sr, &sc, m)?;
        let weights = softmax(&cands.scores());
        for (c, w) in cands.entries.iter().zip(weights) {
            for (o, v) in out.iter_mut().zip(values.v.row(c.index)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Exhaustive top-m over all `n^2` cells of a grid score function.
pub fn exhaustive_topm(side: usize, m: usize, score: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..side * side).map(|k| (score(k / side, k % side), k)).collect();
    all.sort_by(|a, b| rank_order(*a, *b));
    all.truncate(m);
    all.into_iter().map(|(_, k)| k).collect()
}
