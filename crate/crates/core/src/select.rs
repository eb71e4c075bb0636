//! Deterministic top-m selection.
//!
//! Ordering is by value descending, then index ascending, so ties always go
//! to the lowest index. Signed zeros compare equal.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[inline]
pub(crate) fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    (b.0 + 0.0).total_cmp(&(a.0 + 0.0)).then(a.1.cmp(&b.1))
}

/// Indices of the `m` largest entries of `values`, best first.
pub fn top_m_indices(values: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > values.len() {
        return Err(Error::arg(format!(
            "top-m requires 1 <= m <= n, got m={m}, n={}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| rank_order((values[*a], *a), (values[*b], *b));
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, cmp);
        idx.truncate(m);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

/// Top-m over `(score, key)` pairs where `key` is the tie-breaking index.
/// Returns positions into `items`, best first. `m` larger than the item count
/// returns everything in rank order.
pub(crate) fn top_m_keyed(items: &[(f64, usize)], m: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..items.len()).collect();
    let cmp = |a: &usize, b: &usize| rank_order(items[*a], items[*b]);
    if m > 0 && m < pos.len() {
        pos.select_nth_unstable_by(m - 1, cmp);
        pos.truncate(m);
    }
    pos.sort_unstable_by(cmp);
    pos
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_largest_in_order() {
        assert_eq!(top_m_indices(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(top_m_indices(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert_eq!(top_m_indices(&[1.0, 2.0, 2.0, 2.0], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn m_out_of_range_is_rejected() {
        assert!(top_m_indices(&[1.0, 2.0], 3).is_err());
        assert!(top_m_indices(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn full_selection_is_a_sort() {
        let v = [3.0, -1.0, 7.0, 3.0];
        assert_eq!(top_m_indices(&v, 4).unwrap(), vec![2, 0, 3, 1]);
    }
}
