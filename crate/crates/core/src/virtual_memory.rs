//! Implicit value expansion.
//!
//! The physical table `V` (`N x D_v`) is expanded into `E` virtual tables
//! `V W_p` addressed through a fixed shuffle. Pooling happens per block on
//! the physical rows first, so the virtual tables are never materialized.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pkm::{CandidateSet, MemoryValues};
use crate::tensor::Tensor;

/// The `E` linear reparameterizations, each `D_v x D'_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualProjectors {
    pub w: Vec<Tensor>,
}

impl VirtualProjectors {
    pub fn new(w: Vec<Tensor>) -> Result<Self> {
        let first = w.first().ok_or_else(|| Error::config("expansion rate must be at least 1"))?;
        if first.ndim() != 2 {
            return Err(Error::shape("virtual_projectors", first.shape(), &[0, 0]));
        }
        for p in &w {
            if p.shape() != first.shape() {
                return Err(Error::shape("virtual_projectors", first.shape(), p.shape()));
            }
        }
        Ok(Self { w })
    }

    pub fn expansion(&self) -> usize {
        self.w.len()
    }

    pub fn in_dim(&self) -> usize {
        self.w[0].shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w[0].shape()[1]
    }
}

/// Fixed permutation of the `E * N` virtual addresses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleMap {
    pub seed: u64,
    pub slots: usize,
    perm: Vec<u32>,
    inverse: Vec<u32>,
}

impl ShuffleMap {
    /// Seeded shuffle over `expansion * slots` addresses.
    pub fn new(seed: u64, expansion: usize, slots: usize) -> Self {
        let mut perm: Vec<u32> = (0..(expansion * slots) as u32).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_permutation(seed, slots, perm).expect("shuffle is a permutation")
    }

    pub fn identity(expansion: usize, slots: usize) -> Self {
        let perm = (0..(expansion * slots) as u32).collect();
        Self::from_permutation(0, slots, perm).expect("identity is a permutation")
    }

    pub fn from_permutation(seed: u64, slots: usize, perm: Vec<u32>) -> Result<Self> {
        if slots == 0 || perm.len() % slots != 0 || perm.is_empty() {
            return Err(Error::arg(format!(
                "shuffle of length {} does not cover a table of {slots} slots",
                perm.len()
            )));
        }
        let mut inverse = vec![u32::MAX; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            let slot = inverse
                .get_mut(p as usize)
                .ok_or_else(|| Error::arg(format!("shuffle entry {p} out of range")))?;
            if *slot != u32::MAX {
                return Err(Error::arg(format!("shuffle entry {p} repeated")));
            }
            *slot = k as u32;
        }
        Ok(Self {
            seed,
            slots,
            perm,
            inverse,
        })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn expansion(&self) -> usize {
        self.perm.len() / self.slots
    }

    pub fn permutation(&self) -> &[u32] {
        &self.perm
    }

    /// Virtual address to `(physical row, block)`.
    pub fn resolve(&self, v: usize) -> Result<(usize, usize)> {
        let s = *self.perm.get(v).ok_or(Error::Bounds {
            op: "resolve_virtual",
            index: v,
            len: self.perm.len(),
        })? as usize;
        Ok((s % self.slots, s / self.slots))
    }

    /// Inverse of [`ShuffleMap::resolve`].
    pub fn invert(&self, physical: usize, block: usize) -> Result<usize> {
        let s = block * self.slots + physical;
        if physical >= self.slots || s >= self.perm.len() {
            return Err(Error::Bounds {
                op: "invert_virtual",
                index: s,
                len: self.perm.len(),
            });
        }
        Ok(self.inverse[s] as usize)
    }
}

pub fn resolve_virtual(map: &ShuffleMap, v: usize) -> Result<(usize, usize)> {
    map.resolve(v)
}

/// Side of the square logical grid covering `expansion * slots` addresses.
pub fn grid_side(expansion: usize, slots: usize) -> usize {
    let total = expansion * slots;
    let mut s = (total as f64).sqrt() as usize;
    while s * s < total {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= total {
        s -= 1;
    }
    s
}

/// Score-weighted pooling over virtual addresses without materializing the
/// expanded table: per block, pool physical rows, then project.
pub fn pool_on_demand(
    cands: &CandidateSet,
    values: &MemoryValues,
    proj: &VirtualProjectors,
    map: &ShuffleMap,
) -> Result<Vec<f64>> {
    let scores = cands.scores();
    pool_on_demand_chunked(cands, &[&scores], values, proj, map)
}

/// As [`pool_on_demand`] but with `h` score vectors, score `c` weighting
/// columns `[c * D_v / h, (c + 1) * D_v / h)` of the physical values.
pub fn pool_on_demand_chunked(
    cands: &CandidateSet,
    chunk_scores: &[&[f64]],
    values: &MemoryValues,
    proj: &VirtualProjectors,
    map: &ShuffleMap,
) -> Result<Vec<f64>> {
    let dv = values.dim();
    let h = chunk_scores.len();
    if h == 0 || dv % h != 0 {
        return Err(Error::config(format!("value dimension {dv} is not divisible by core count {h}")));
    }
    if proj.in_dim() != dv || proj.expansion() != map.expansion() || map.slots != values.slots() {
        return Err(Error::shape("pool_on_demand", proj.w[0].shape(), values.v.shape()));
    }
    let chunk = dv / h;
    let e = proj.expansion();
    let mut pooled = vec![0.0; e * dv];
    for (k, c) in cands.entries.iter().enumerate() {
        let (phys, p) = map.resolve(c.index)?;
        let row = values.v.row(phys);
        for (ci, s) in chunk_scores.iter().enumerate() {
            let w = s[k];
            for x in ci * chunk..(ci + 1) * chunk {
                pooled[p * dv + x] += w * row[x];
            }
        }
    }
    let dout = proj.out_dim();
    let mut out = vec![0.0; dout];
    for (p, w) in proj.w.iter().enumerate() {
        for x in 0..dv {
            let a = pooled[p * dv + x];
            if a != 0.0 {
                out.iter_mut().zip(w.row(x)).for_each(|(o, v)| *o += a * v);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IveMode {
    Naive,
    OnDemand,
}

/// Multiply-accumulate count of the projector work.
pub fn flop_count_ive(mode: IveMode, e: u128, n: u128, b: u128, dv: u128, dv_out: u128) -> u128 {
    match mode {
        IveMode::Naive => e * n * dv * dv_out,
        IveMode::OnDemand => e * b * dv * dv_out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_shuffle_places_expansions_a_table_apart() {
        let map = ShuffleMap::identity(3, 5);
        for k in 0..5 {
            for p in 0..3 {
                assert_eq!(map.invert(k, p).unwrap(), k + p * 5);
            }
        }
        assert_eq!(ShuffleMap::identity(1, 4).resolve(3).unwrap(), (3, 0));
    }

    #[test]
    fn resolve_round_trips_and_rejects_padding() {
        let map = ShuffleMap::new(9, 4, 7);
        for v in 0..28 {
            let (k, p) = map.resolve(v).unwrap();
            assert_eq!(map.invert(k, p).unwrap(), v);
        }
        assert!(map.resolve(28).is_err());
        assert_eq!(map, ShuffleMap::new(9, 4, 7));
        assert_ne!(map.permutation(), ShuffleMap::new(10, 4, 7).permutation());
    }

    #[test]
    fn corrupt_permutations_are_rejected() {
        assert!(ShuffleMap::from_permutation(0, 2, vec![0, 0, 1, 2]).is_err());
        assert!(ShuffleMap::from_permutation(0, 2, vec![0, 5]).is_err());
        assert!(ShuffleMap::from_permutation(0, 2, vec![0, 1, 2]).is_err());
    }

    #[test]
    fn grid_side_rounds_up() {
        assert_eq!(grid_side(1, 16), 4);
        assert_eq!(grid_side(2, 8), 4);
        assert_eq!(grid_side(2, 16), 6);
        assert_eq!(grid_side(4, 1024), 64);
    }

    #[test]
    fn flop_counts() {
        assert_eq!(flop_count_ive(IveMode::Naive, 4, 1_000_000, 4096, 64, 64), 16_384_000_000);
        assert_eq!(flop_count_ive(IveMode::OnDemand, 4, 1_000_000, 4096, 64, 64), 67_108_864);
        assert_eq!(
            flop_count_ive(IveMode::Naive, 1, 100, 100, 8, 8),
            flop_count_ive(IveMode::OnDemand, 1, 100, 100, 8, 8)
        );
    }
}
