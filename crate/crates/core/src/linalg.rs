//! Singular value decomposition of small square matrices.
//!
//! The 2x2 case uses the closed form; larger matrices use one-sided Jacobi
//! rotations. Both return factors with `C = U diag(s) T^T`, singular values
//! sorted descending.

/// Full SVD of an `r x r` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub rank: usize,
    /// Left singular vectors, stored column-wise: `u[j]` is the j-th column.
    pub u: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    /// Right singular vectors, `t[j]` is the j-th column.
    pub t: Vec<Vec<f64>>,
}

impl Svd {
    pub fn reconstruct(&self) -> Vec<f64> {
        let r = self.rank;
        let mut out = vec![0.0; r * r];
        for k in 0..r {
            for i in 0..r {
                for j in 0..r {
                    out[i * r + j] += self.u[k][i] * self.s[k] * self.t[k][j];
                }
            }
        }
        out
    }
}

pub const JACOBI_TOL: f64 = 1e-10;

pub fn svd(c: &[f64], r: usize) -> Svd {
    assert_eq!(c.len(), r * r, "svd expects a square matrix");
    match r {
        1 => {
            let sign = if c[0] < 0.0 { -1.0 } else { 1.0 };
            Svd {
                rank: 1,
                u: vec![vec![1.0]],
                s: vec![c[0].abs()],
                t: vec![vec![sign]],
            }
        }
        2 => svd2(c),
        _ => svd_jacobi(c, r),
    }
}

fn svd2(c: &[f64]) -> Svd {
    let (a, b, cc, d) = (c[0], c[1], c[2], c[3]);
    let e = 0.5 * (a + d);
    let f = 0.5 * (a - d);
    let g = 0.5 * (cc + b);
    let h = 0.5 * (cc - b);
    let q = e.hypot(h);
    let rr = f.hypot(g);
    let sx = q + rr;
    let sy = q - rr;
    let a1 = g.atan2(f);
    let a2 = h.atan2(e);
    let theta = 0.5 * (a2 - a1);
    let phi = 0.5 * (a2 + a1);
    // C = Rot(phi) diag(sx, sy) Rot(theta)
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let u1 = vec![cp, sp];
    let mut u2 = vec![-sp, cp];
    let t1 = vec![ct, -st];
    let t2 = vec![st, ct];
    let s2 = if sy < 0.0 {
        u2.iter_mut().for_each(|x| *x = -*x);
        -sy
    } else {
        sy
    };
    Svd {
        rank: 2,
        u: vec![u1, u2],
        s: vec![sx, s2],
        t: vec![t1, t2],
    }
}

fn svd_jacobi(c: &[f64], r: usize) -> Svd {
    // cols[j] is column j of the working matrix.
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| (0..r).map(|i| c[i * r + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..r)
        .map(|j| (0..r).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..r {
            for q in p + 1..r {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for m in [&mut cols, &mut v] {
                    for i in 0..r {
                        let xp = m[p][i];
                        let xq = m[q][i];
                        m[p][i] = cs * xp - sn * xq;
                        m[q][i] = sn * xp + cs * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..r).collect();
    // Stable sort keeps the earlier column first on exact ties.
    order.sort_by(|a, b| norms[*b].total_cmp(&norms[*a]));

    let scale = norms.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut s = Vec::with_capacity(r);
    let mut t = Vec::with_capacity(r);
    for &j in &order {
        s.push(norms[j]);
        t.push(v[j].clone());
        if norms[j] > 1e-14 * scale {
            u.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u.push(complete_basis(&u, r));
        }
    }
    Svd { rank: r, u, s, t }
}

/// A unit vector orthogonal to every vector in `basis`.
fn complete_basis(basis: &[Vec<f64>], r: usize) -> Vec<f64> {
    let mut best = vec![0.0; r];
    let mut best_norm = -1.0;
    for e in 0..r {
        let mut cand: Vec<f64> = (0..r).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
        for b in basis {
            let dot: f64 = cand.iter().zip(b).map(|(x, y)| x * y).sum();
            cand.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > best_norm {
            best_norm = n;
            best = cand.iter().map(|x| x / n).collect();
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fro(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check(c: &[f64], r: usize) {
        let f = svd(c, r);
        let rec = f.reconstruct();
        let err: Vec<f64> = rec.iter().zip(c).map(|(a, b)| a - b).collect();
        assert!(fro(&err) <= 1e-8 * fro(c).max(1e-300), "reconstruction {err:?}");
        for w in f.s.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(f.s.iter().all(|s| *s >= 0.0));
        for k in 0..r {
            assert!((fro(&f.u[k]) - 1.0).abs() < 1e-10);
            assert!((fro(&f.t[k]) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn diagonal_2x2() {
        let f = svd(&[3.0, 0.0, 0.0, 1.0], 2);
        assert!((f.s[0] - 3.0).abs() < 1e-15 && (f.s[1] - 1.0).abs() < 1e-15);
        assert!((f.u[0][0].abs() - 1.0).abs() < 1e-15);
        assert!((f.t[0][0].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn antidiagonal_2x2() {
        let f = svd(&[0.0, 2.0, 1.0, 0.0], 2);
        assert!((f.s[0] - 2.0).abs() < 1e-14 && (f.s[1] - 1.0).abs() < 1e-14);
        // Leading pair is (1,0) / (0,1) up to a joint sign.
        let sign = f.u[0][0].signum();
        assert!((f.u[0][0] * sign - 1.0).abs() < 1e-14 && f.u[0][1].abs() < 1e-14);
        assert!(f.t[0][0].abs() < 1e-14 && (f.t[0][1] * sign - 1.0).abs() < 1e-14);
        check(&[0.0, 2.0, 1.0, 0.0], 2);
    }

    #[test]
    fn random_reconstruction_all_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in 1..=6 {
            for _ in 0..50 {
                let c: Vec<f64> = (0..r * r).map(|_| rng.gen_range(-2.0..2.0)).collect();
                check(&c, r);
            }
        }
    }

    #[test]
    fn rank_deficient_matrices() {
        // Rank-1 3x3 and the zero matrix.
        let u = [1.0, -2.0, 0.5];
        let t = [0.3, 0.0, 1.0];
        let c: Vec<f64> = (0..9).map(|k| u[k / 3] * t[k % 3]).collect();
        check(&c, 3);
        let f = svd(&[0.0; 9], 3);
        assert!(f.s.iter().all(|s| *s == 0.0));
        check(&[0.0, 0.0, 0.0, 0.0], 2);
    }
}
