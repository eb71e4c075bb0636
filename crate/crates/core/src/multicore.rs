//! Multi-core scoring: `h` component cores whose sum selects candidates while
//! each component scores its own vertical chunk of the values.

use crate::error::{Error, Result};
use crate::pkm::{CandidateSet, MemoryValues};
use crate::tensor::Tensor;
use crate::tucker::{bilinear, TuckerCore};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiCore {
    pub components: Vec<Tensor>,
}

impl MultiCore {
    pub fn new(components: Vec<Tensor>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::config("multi-core scoring needs at least one component"))?;
        TuckerCore::new(first.clone())?;
        for c in &components {
            if c.shape() != first.shape() {
                return Err(Error::shape("multi_core", first.shape(), c.shape()));
            }
        }
        Ok(Self { components })
    }

    pub fn count(&self) -> usize {
        self.components.len()
    }

    pub fn rank(&self) -> usize {
        self.components[0].shape()[0]
    }
}

/// Elementwise sum of the component cores.
pub fn aggregate_core(mc: &MultiCore) -> TuckerCore {
    let mut sum = Tensor::zeros(mc.components[0].shape());
    for c in &mc.components {
        sum.data_mut().iter_mut().zip(c.data()).for_each(|(s, v)| *s += v);
    }
    TuckerCore { c: sum }
}

/// Per-component bilinear scores of each candidate: `out[c][k]`.
///
/// `s_row` and `s_col` are `[r, n]` row-major.
pub fn component_scores(cands: &CandidateSet, s_row: &[f64], s_col: &[f64], mc: &MultiCore) -> Vec<Vec<f64>> {
    let r = mc.rank();
    let n = s_row.len() / r;
    let mut a = vec![0.0; r];
    let mut b = vec![0.0; r];
    mc.components
        .iter()
        .map(|core| {
            cands
                .entries
                .iter()
                .map(|c| {
                    for x in 0..r {
                        a[x] = s_row[x * n + c.row];
                        b[x] = s_col[x * n + c.col];
                    }
                    bilinear(core.data(), r, &a, &b)
                })
                .collect()
        })
        .collect()
}

/// Pools physical values chunk by chunk, chunk `i` weighted by component
/// `i`'s score of each candidate. Candidate indices address rows of `values`.
pub fn mcs_pool(
    cands: &CandidateSet,
    s_row: &[f64],
    s_col: &[f64],
    mc: &MultiCore,
    values: &MemoryValues,
) -> Result<Vec<f64>> {
    let h = mc.count();
    let dv = values.dim();
    if dv % h != 0 {
        return Err(Error::config(format!("value dimension {dv} is not divisible by core count {h}")));
    }
    let chunk = dv / h;
    let scores = component_scores(cands, s_row, s_col, mc);
    let mut out = vec![0.0; dv];
    for (k, c) in cands.entries.iter().enumerate() {
        if c.index >= values.slots() {
            return Err(Error::Bounds {
                op: "mcs_pool",
                index: c.index,
                len: values.slots(),
            });
        }
        let row = values.v.row(c.index);
        for (i, s) in scores.iter().enumerate() {
            for x in i * chunk..(i + 1) * chunk {
                out[x] += s[k] * row[x];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_cancels() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let neg = Tensor::from_rows(&[&[-1.0, -2.0], &[-3.0, -4.0]]);
        let b = Tensor::from_rows(&[&[0.5, 0.0], &[0.0, 0.25]]);
        let mc = MultiCore::new(vec![a.clone(), neg, b.clone()]).unwrap();
        assert_eq!(aggregate_core(&mc).c, b);
        assert_eq!(aggregate_core(&MultiCore::new(vec![a.clone()]).unwrap()).c, a);
    }

    #[test]
    fn indivisible_value_dim_is_config_error() {
        let mc = MultiCore::new(vec![Tensor::eye(1), Tensor::eye(1)]).unwrap();
        let cands = CandidateSet { entries: vec![], m: 1 };
        let values = MemoryValues::new(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(mcs_pool(&cands, &[0.0], &[0.0], &mc, &values), Err(Error::Config(_))));
    }
}
