use proptest::prelude::*;
use ultramem::cost::{
    crossover_batch, crossover_linear_scan, dimensionwise_comm, moe_access, numberwise_comm, ratio_boundary,
    sweep_points, ultramem_access, CostScenario, PartitionScenario,
};
use ultramem::multicore::{aggregate_core, component_scores, mcs_pool, MultiCore};
use ultramem::pkm::{exhaustive_topm, two_phase_topm, MemoryValues};
use ultramem::select::top_m_indices;
use ultramem::tucker::{approx_topm_retrieve, TuckerCore};
use ultramem::virtual_memory::{grid_side, ShuffleMap};
use ultramem::Tensor;

fn grid(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4i32..4, n).prop_map(|v| v.into_iter().map(f64::from).collect())
}

proptest! {
    #[test]
    fn top_m_is_sorted_prefix_with_index_tie_break(v in grid(24), m in 1usize..24) {
        let got = top_m_indices(&v, m).unwrap();
        let mut all: Vec<usize> = (0..v.len()).collect();
        all.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        prop_assert_eq!(got, all[..m].to_vec());
    }

    #[test]
    fn two_phase_matches_exhaustive_on_additive_grid(
        (n, m, r, c) in (1usize..12).prop_flat_map(|n| (Just(n), 1..=n, grid(n), grid(n)))
    ) {
        let got = two_phase_topm(&r, &c, m).unwrap();
        let want = exhaustive_topm(n, m, |i, j| r[i] + c[j]);
        prop_assert_eq!(got.indices(), want);
    }

    #[test]
    fn rank_one_core_retrieval_is_exact(
        seed in any::<u64>(),
        n in 4usize..16,
        r in 1usize..4,
        m in 1usize..4,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u = Tensor::randn(&[r, 1], 1.0, &mut rng);
        let t = Tensor::randn(&[1, r], 1.0, &mut rng);
        let mut c = vec![0.0; r * r];
        for a in 0..r {
            for b in 0..r {
                c[a * r + b] = u.data()[a] * t.data()[b];
            }
        }
        let core = TuckerCore::new(Tensor::new(&[r, r], c).unwrap()).unwrap();
        let s_row = Tensor::randn(&[r, n], 1.0, &mut rng).into_data();
        let s_col = Tensor::randn(&[r, n], 1.0, &mut rng).into_data();
        let m = m.min(n);
        let got = approx_topm_retrieve(&s_row, &s_col, &core, m).unwrap();
        let score = |i: usize, j: usize| {
            let a: Vec<f64> = (0..r).map(|x| s_row[x * n + i]).collect();
            let b: Vec<f64> = (0..r).map(|x| s_col[x * n + j]).collect();
            core.bilinear(&a, &b)
        };
        let want = exhaustive_topm(n, m, score);
        prop_assert_eq!(got.index_set(), want.iter().copied().collect());
        for e in &got.entries {
            prop_assert!((e.score - score(e.row, e.col)).abs() < 1e-12);
        }
    }

    #[test]
    fn component_pooling_sums_to_aggregate_when_chunks_coincide(seed in any::<u64>(), h in 1usize..4) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (r, n, m) = (2, 6, 3);
        let comps: Vec<Tensor> = (0..h).map(|_| Tensor::randn(&[r, r], 1.0, &mut rng)).collect();
        let mc = MultiCore::new(comps).unwrap();
        let agg = aggregate_core(&mc);
        let s_row = Tensor::randn(&[r, n], 1.0, &mut rng).into_data();
        let s_col = Tensor::randn(&[r, n], 1.0, &mut rng).into_data();
        let cands = approx_topm_retrieve(&s_row, &s_col, &agg, m).unwrap();
        let per = component_scores(&cands, &s_row, &s_col, &mc);
        for (k, e) in cands.entries.iter().enumerate() {
            let sum: f64 = per.iter().map(|s| s[k]).sum();
            prop_assert!((sum - e.score).abs() < 1e-12);
        }
        let row = Tensor::randn(&[1, h], 1.0, &mut rng).into_data();
        let mut v = Vec::new();
        for _ in 0..n * n {
            for &x in &row {
                v.push(x);
            }
        }
        let values = MemoryValues::new(Tensor::new(&[n * n, h], v).unwrap()).unwrap();
        let pooled = mcs_pool(&cands, &s_row, &s_col, &mc, &values).unwrap();
        for (c, p) in pooled.iter().enumerate() {
            let want: f64 = per[c].iter().sum::<f64>() * row[c];
            prop_assert!((p - want).abs() < 1e-10);
        }
    }

    #[test]
    fn shuffle_resolves_and_inverts(seed in any::<u64>(), e in 1usize..5, n in 1usize..40) {
        let map = ShuffleMap::new(seed, e, n);
        let mut seen = vec![false; e * n];
        for v in 0..e * n {
            let (phys, block) = map.resolve(v).unwrap();
            prop_assert!(phys < n && block < e);
            prop_assert!(!seen[block * n + phys]);
            seen[block * n + phys] = true;
            prop_assert_eq!(map.invert(phys, block).unwrap(), v);
        }
        prop_assert!(map.resolve(e * n).is_err());
        let side = grid_side(e, n);
        prop_assert!(side * side >= e * n && (side - 1) * (side - 1) < e * n);
    }

    #[test]
    fn access_curves_are_monotone_and_capped(
        d in 1u64..64, topm in 1u64..64, slots in 1u64..5000, experts in 1u64..64, b in 0u64..5000,
    ) {
        let s = CostScenario {
            d_model: 2 * d,
            batch: b,
            topm,
            slots,
            experts,
            moe_layers: 1,
            memory_layers: 1,
            compact_experts: true,
        };
        let next = s.with_batch(b + 1);
        prop_assert!(moe_access(&next) >= moe_access(&s));
        prop_assert!(ultramem_access(&next) >= ultramem_access(&s));
        prop_assert!(ultramem_access(&s) <= slots as u128 * d as u128);
        prop_assert!(moe_access(&s) <= experts as u128 * 2 * (2 * d as u128).pow(2));
        if b * topm <= slots {
            prop_assert_eq!(ultramem_access(&s), (b * topm * d) as u128);
        }
    }

    #[test]
    fn bisection_agrees_with_linear_scan(
        d in 1u64..16, topm in 1u64..32, slots in 1u64..3000, experts in 1u64..40, ml in 1u64..8, ul in 1u64..8,
    ) {
        let s = CostScenario {
            d_model: 2 * d,
            batch: 1,
            topm,
            slots,
            experts,
            moe_layers: ml,
            memory_layers: ul,
            compact_experts: true,
        };
        prop_assert_eq!(crossover_batch(&s), crossover_linear_scan(&s));
    }

    #[test]
    fn partition_boundary_ignores_batch_and_separates_regimes(
        p in 2u64..64, topm in 2u64..256, bs in 1u64..1000, scale in 1u64..50, v in 1u64..4096,
    ) {
        let at = |bs| PartitionScenario { devices: p, bs, topm, v_dim: v };
        let boundary = ratio_boundary(topm, p).unwrap();
        let (a, b) = (at(bs), at(bs * scale));
        let ratio = numberwise_comm(&a) / dimensionwise_comm(&a);
        let scaled = numberwise_comm(&b) / dimensionwise_comm(&b);
        prop_assert!((ratio - scaled).abs() <= 1e-12 * ratio);
        let gap = (v as f64 - boundary) / boundary;
        if gap > 1e-9 {
            prop_assert!(numberwise_comm(&a) > dimensionwise_comm(&a));
        } else if gap < -1e-9 {
            prop_assert!(numberwise_comm(&a) < dimensionwise_comm(&a));
        }
    }

    #[test]
    fn sweep_points_are_sorted_and_bounded(lo in 1u64..10_000, span in 0u64..1_000_000, log: bool) {
        let hi = lo + span;
        let pts = sweep_points(lo, hi, log).unwrap();
        prop_assert_eq!(pts[0], lo);
        prop_assert_eq!(*pts.last().unwrap(), hi);
        prop_assert!(pts.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn single_value_memory_has_no_boundary() {
    assert_eq!(ratio_boundary(1, 8), None);
}

#[test]
fn top_m_rejects_out_of_range_m() {
    assert!(top_m_indices(&[1.0, 2.0], 0).is_err());
    assert!(top_m_indices(&[1.0, 2.0], 3).is_err());
}
