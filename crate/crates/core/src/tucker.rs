//! Tucker-decomposed query-key retrieval.
//!
//! Grid scores are bilinear forms `S_row[:, i]^T C S_col[:, j]` with a small
//! learnable core `C`. Candidates are filtered with the leading singular pair
//! of `C` and the survivors are rescored exactly.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeSet};

use crate::autodiff::aux_loss_value_grad;
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::pkm::{CandidateSet, ProductKeySet};
use crate::select::{rank_order, top_m_indices};
use crate::tensor::Tensor;

/// Square learnable core.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerCore {
    pub c: Tensor,
}

impl TuckerCore {
    pub fn new(c: Tensor) -> Result<Self> {
        match c.shape() {
            [r, s] if r == s && *r >= 1 => Ok(Self { c }),
            other => Err(Error::shape("tucker_core", other, &[other[0], other[0]])),
        }
    }

    pub fn rank(&self) -> usize {
        self.c.shape()[0]
    }

    /// `a^T C b` for rank-length vectors.
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        bilinear(self.c.data(), self.rank(), a, b)
    }
}

pub(crate) fn bilinear(c: &[f64], r: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in 0..r {
        let mut inner = 0.0;
        for y in 0..r {
            inner += c[x * r + y] * b[y];
        }
        s += a[x] * inner;
    }
    s
}

/// Leading singular pair of a core together with its full spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneFactor {
    pub u: Vec<f64>,
    pub t: Vec<f64>,
    pub singular_values: Vec<f64>,
}

pub fn rank1_factor(core: &TuckerCore) -> RankOneFactor {
    let f = svd(core.c.data(), core.rank());
    RankOneFactor {
        u: f.u[0].clone(),
        t: f.t[0].clone(),
        singular_values: f.s,
    }
}

/// Per-rank scores of row and column keys against their queries.
///
/// Keys `[n, D_k]` and queries `[D_k]` are split into `r` slices of width
/// `D_k / r`. Returns `(S_row, S_col)`, each `[r, n]`.
pub fn tucker_row_col_scores(
    q_row: &[f64],
    q_col: &[f64],
    keys: &ProductKeySet,
    r: usize,
) -> Result<(Tensor, Tensor)> {
    let dk = keys.key_dim();
    if r == 0 || dk % r != 0 {
        return Err(Error::config(format!("key dimension {dk} is not divisible by tucker rank {r}")));
    }
    if q_row.len() != dk || q_col.len() != dk {
        return Err(Error::shape("tucker_row_col_scores", &[q_row.len()], &[dk]));
    }
    let n = keys.side();
    let w = dk / r;
    let score = |k: &Tensor, q: &[f64]| {
        let mut out = vec![0.0; r * n];
        for a in 0..r {
            for i in 0..n {
                out[a * n + i] = k.row(i)[a * w..(a + 1) * w]
                    .iter()
                    .zip(&q[a * w..(a + 1) * w])
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        Tensor::new(&[r, n], out)
    };
    Ok((score(&keys.k_row, q_row)?, score(&keys.k_col, q_col)?))
}

/// How the first filtering phase picks surviving rows and columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Exact top-m of the rank-1 product grid `(u^T S_row)_i (t^T S_col)_j`;
    /// survivors are the rows and columns of those cells.
    #[default]
    ProductAware,
    /// Independent top-m of `u^T S_row` and of `t^T S_col`.
    PerVector,
}

/// Two-phase retrieval on an `n x n` grid whose cells at flat index
/// `>= limit` are padding and never returned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrieveOptions {
    pub selection: Selection,
    pub limit: Option<usize>,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            selection: Selection::ProductAware,
            limit: None,
        }
    }
}

/// Approximate top-m over the bilinear grid with exact rescoring.
///
/// `s_row` and `s_col` are `[r, n]` row-major.
pub fn approx_topm_retrieve(s_row: &[f64], s_col: &[f64], core: &TuckerCore, m: usize) -> Result<CandidateSet> {
    approx_topm_retrieve_with(s_row, s_col, core, m, RetrieveOptions::default())
}

pub fn approx_topm_retrieve_with(
    s_row: &[f64],
    s_col: &[f64],
    core: &TuckerCore,
    m: usize,
    opts: RetrieveOptions,
) -> Result<CandidateSet> {
    let r = core.rank();
    if s_row.len() != s_col.len() || s_row.len() % r != 0 {
        return Err(Error::shape("approx_topm_retrieve", &[s_row.len()], &[s_col.len()]));
    }
    let n = s_row.len() / r;
    let limit = opts.limit.unwrap_or(n * n).min(n * n);
    if m == 0 || m > n || m > limit {
        return Err(Error::arg(format!("approximate top-m requires 1 <= m <= n, got m={m}, n={n}")));
    }
    let f = rank1_factor(core);
    let project = |s: &[f64], v: &[f64]| -> Vec<f64> {
        (0..n).map(|i| (0..r).map(|a| v[a] * s[a * n + i]).sum()).collect()
    };
    let a = project(s_row, &f.u);
    let b = project(s_col, &f.t);
    let (rows, cols) = match opts.selection {
        Selection::ProductAware => {
            let best = top_products(&a, &b, m, limit);
            let rows: BTreeSet<usize> = best.iter().map(|k| k / n).collect();
            let cols: BTreeSet<usize> = best.iter().map(|k| k % n).collect();
            (rows.into_iter().collect::<Vec<_>>(), cols.into_iter().collect::<Vec<_>>())
        }
        Selection::PerVector => (top_m_indices(&a, m)?, top_m_indices(&b, m)?),
    };
    let c = core.c.data();
    let mut cells = Vec::with_capacity(rows.len() * cols.len());
    let mut ra = vec![0.0; r];
    let mut cb = vec![0.0; r];
    for &i in &rows {
        for x in 0..r {
            ra[x] = s_row[x * n + i];
        }
        for &j in &cols {
            if n * i + j >= limit {
                continue;
            }
            for y in 0..r {
                cb[y] = s_col[y * n + j];
            }
            cells.push((i, j, bilinear(c, r, &ra, &cb)));
        }
    }
    Ok(CandidateSet::from_cells(&cells, n, m))
}

#[derive(PartialEq)]
struct Frontier {
    score: f64,
    index: usize,
    row: usize,
    pos: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap pops the maximum; the best-ranked cell must compare greatest.
        rank_order((other.score, other.index), (self.score, self.index))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Flat indices of the `m` largest products `a[i] * b[j]` with index below
/// `limit`, by k-way merge over rows.
fn top_products(a: &[f64], b: &[f64], m: usize, limit: usize) -> Vec<usize> {
    let n = a.len();
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|x, y| rank_order((b[*x], *x), (b[*y], *y)));
    let mut asc: Vec<usize> = (0..n).collect();
    asc.sort_by(|x, y| b[*x].total_cmp(&b[*y]).then(x.cmp(y)));
    let natural: Vec<usize> = (0..n).collect();
    let order = |i: usize| -> &[usize] {
        if a[i] > 0.0 {
            &desc
        } else if a[i] < 0.0 {
            &asc
        } else {
            &natural
        }
    };
    let cell = |i: usize, pos: usize| -> Frontier {
        let j = order(i)[pos];
        Frontier {
            score: a[i] * b[j] + 0.0,
            index: n * i + j,
            row: i,
            pos,
        }
    };
    let mut heap: BinaryHeap<Frontier> = (0..n).map(|i| cell(i, 0)).collect();
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let Some(top) = heap.pop() else { break };
        if top.index < limit {
            out.push(top.index);
        }
        if top.pos + 1 < n {
            heap.push(cell(top.row, top.pos + 1));
        }
    }
    out
}

/// Singular-value margin penalty on a core (zero for rank 1).
pub fn aux_loss(core: &TuckerCore, alpha: f64, tau: f64) -> f64 {
    aux_loss_value_grad(core.c.data(), core.rank(), alpha, tau).0
}

/// Fraction of `truth` found in `found`.
pub fn recall(found: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let f: BTreeSet<usize> = found.iter().copied().collect();
    truth.iter().filter(|k| f.contains(k)).count() as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pkm::{exhaustive_topm, row_col_scores, two_phase_topm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factor_of_diagonal_core() {
        let f = rank1_factor(&TuckerCore::new(Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]])).unwrap());
        assert_eq!(f.singular_values, vec![3.0, 1.0]);
        assert!((f.u[0].abs() - 1.0).abs() < 1e-15 && f.u[1].abs() < 1e-15);
        assert!((f.t[0].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rank_one_scores_match_product_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let keys = ProductKeySet::new(Tensor::randn(&[6, 4], 1.0, &mut rng), Tensor::randn(&[6, 4], 1.0, &mut rng)).unwrap();
        let x = Tensor::randn(&[4], 1.0, &mut rng).into_data();
        let (sr, sc) = tucker_row_col_scores(&x, &x, &keys, 1).unwrap();
        let (pr, pc) = row_col_scores(&x, &keys, &Tensor::eye(4), &Tensor::eye(4)).unwrap();
        assert_eq!(sr.data(), &pr[..]);
        assert_eq!(sc.data(), &pc[..]);
        assert!(tucker_row_col_scores(&x, &x, &keys, 3).is_err());
    }

    #[test]
    fn zero_query_gives_zero_scores() {
        let keys = ProductKeySet::new(Tensor::full(&[3, 4], 1.0), Tensor::full(&[3, 4], 1.0)).unwrap();
        let (sr, sc) = tucker_row_col_scores(&[0.0; 4], &[0.0; 4], &keys, 2).unwrap();
        assert!(sr.data().iter().chain(sc.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn top_products_handles_signs_and_padding() {
        let a = [2.0, -3.0, 0.0];
        let b = [-1.0, 0.5, 4.0];
        let want = exhaustive_topm(3, 4, |i, j| a[i] * b[j]);
        assert_eq!(top_products(&a, &b, 4, 9), want);
        let padded = top_products(&a, &b, 3, 6);
        assert!(padded.iter().all(|k| *k < 6));
    }

    #[test]
    fn rank_one_core_reproduces_multiplicative_selection() {
        let core = TuckerCore::new(Tensor::from_rows(&[&[2.0]])).unwrap();
        let sr = [0.5, -1.0, 3.0];
        let sc = [1.0, 2.0, -2.0];
        let got = approx_topm_retrieve(&sr, &sc, &core, 2).unwrap();
        for c in &got.entries {
            assert_eq!(c.score, sr[c.row] * 2.0 * sc[c.col]);
        }
        let want = exhaustive_topm(3, 2, |i, j| 2.0 * sr[i] * sc[j]);
        assert_eq!(got.indices(), want);
    }

    #[test]
    fn m_larger_than_side_is_rejected() {
        let core = TuckerCore::new(Tensor::eye(1)).unwrap();
        assert!(approx_topm_retrieve(&[1.0, 2.0], &[1.0, 2.0], &core, 3).is_err());
        assert!(two_phase_topm(&[1.0], &[1.0], 2).is_err());
    }

    #[test]
    fn aux_loss_examples() {
        let inside = TuckerCore::new(Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 0.1]])).unwrap();
        assert_eq!(aux_loss(&inside, 0.001, 0.15), 0.0);
        let outside = TuckerCore::new(Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 0.5]])).unwrap();
        assert!((aux_loss(&outside, 0.001, 0.15) - 1.225e-4).abs() < 1e-12);
        assert_eq!(aux_loss(&TuckerCore::new(Tensor::eye(1)).unwrap(), 1.0, 0.0), 0.0);
    }

    #[test]
    fn recall_counts_overlap() {
        assert_eq!(recall(&[1, 2, 3], &[3, 4]), 0.5);
        assert_eq!(recall(&[], &[]), 1.0);
    }
}
