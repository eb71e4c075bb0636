//! Analytic inference memory-access and sharded-table communication volumes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element size of a retrieved index in bytes.
pub const INDEX_BYTES: u128 = 4;
/// Element size of a parameter in bytes.
pub const VALUE_BYTES: u128 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostScenario {
    pub d_model: u64,
    /// Inference batch in tokens.
    pub batch: u64,
    /// Values activated per token, all heads together.
    pub topm: u64,
    pub slots: u64,
    pub experts: u64,
    pub moe_layers: u64,
    pub memory_layers: u64,
    /// Count `2 D^2` per chosen expert; when false, the `4 D^2` an expert of
    /// inner width `2D` actually holds.
    #[serde(default = "yes")]
    pub compact_experts: bool,
}

fn yes() -> bool {
    true
}

impl CostScenario {
    /// A 1.6B-parameter-class pair: 32 top-2 MoE layers of 34 experts
    /// against 6 memory layers over a `1792^2` table with 84 values per token.
    pub fn analog_1p6b() -> Self {
        Self {
            d_model: 2048,
            batch: 64,
            topm: 84,
            slots: 1792 * 1792,
            experts: 34,
            moe_layers: 32,
            memory_layers: 6,
            compact_experts: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("topm", self.topm),
            ("slots", self.slots),
            ("experts", self.experts),
        ] {
            if v == 0 {
                return Err(Error::config(format!("cost scenario {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn with_batch(&self, batch: u64) -> Self {
        Self { batch, ..self.clone() }
    }
}

pub fn cost_preset(name: &str) -> Result<CostScenario> {
    match name {
        "1p6b-analog" => Ok(CostScenario::analog_1p6b()),
        _ => Err(Error::config(format!("unknown cost preset `{name}`; known: 1p6b-analog"))),
    }
}

/// Parameter elements one MoE layer reads for a batch.
pub fn moe_access(s: &CostScenario) -> u128 {
    let d = s.d_model as u128;
    let per_expert = if s.compact_experts { 2 * d * d } else { 4 * d * d };
    (2 * s.batch as u128).min(s.experts as u128) * per_expert
}

/// Parameter elements one memory layer reads for a batch.
pub fn ultramem_access(s: &CostScenario) -> u128 {
    (s.batch as u128 * s.topm as u128).min(s.slots as u128) * (s.d_model as u128 / 2)
}

pub fn moe_access_total(s: &CostScenario) -> u128 {
    moe_access(s) * s.moe_layers as u128
}

pub fn ultramem_access_total(s: &CostScenario) -> u128 {
    ultramem_access(s) * s.memory_layers as u128
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crossover {
    At(u64),
    Never,
}

impl std::fmt::Display for Crossover {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Crossover::At(b) => write!(f, "{b}"),
            Crossover::Never => f.write_str("never"),
        }
    }
}

fn memory_reaches_moe(s: &CostScenario, b: u64) -> bool {
    let s = s.with_batch(b);
    ultramem_access_total(&s) >= moe_access_total(&s)
}

/// Batch beyond which neither curve changes.
pub fn saturation_batch(s: &CostScenario) -> u64 {
    s.experts.div_ceil(2).max(s.slots.div_ceil(s.topm)).max(1)
}

/// Smallest batch at which model-total memory-layer access reaches MoE
/// access. Each curve is linear in the batch until it saturates, so between
/// the two saturation points the difference is affine and the predicate is
/// monotone on each of at most three segments; each segment is bisected.
pub fn crossover_batch(s: &CostScenario) -> Crossover {
    let sat = saturation_batch(s);
    let mut kinks = vec![(s.slots / s.topm).clamp(1, sat), (s.experts / 2).clamp(1, sat), sat];
    kinks.sort_unstable();
    let mut lo = 1u64;
    for hi in kinks {
        if hi < lo {
            continue;
        }
        if memory_reaches_moe(s, lo) {
            return Crossover::At(lo);
        }
        if memory_reaches_moe(s, hi) {
            let (mut a, mut b) = (lo, hi);
            while b - a > 1 {
                let mid = a + (b - a) / 2;
                if memory_reaches_moe(s, mid) {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            return Crossover::At(b);
        }
        lo = hi + 1;
    }
    Crossover::Never
}

/// Reference crossover by trying every batch up to saturation.
pub fn crossover_linear_scan(s: &CostScenario) -> Crossover {
    (1..=saturation_batch(s))
        .find(|&b| memory_reaches_moe(s, b))
        .map_or(Crossover::Never, Crossover::At)
}

/// Batch sizes from `lo` to `hi` inclusive, geometric (twenty per decade)
/// or evenly spaced (at most 1001), rounded and deduplicated.
pub fn sweep_points(lo: u64, hi: u64, log: bool) -> Result<Vec<u64>> {
    if lo == 0 || hi < lo {
        return Err(Error::arg(format!("batch range {lo}..{hi} must satisfy 1 <= lo <= hi")));
    }
    let mut out = Vec::new();
    if log {
        let decades = (hi as f64 / lo as f64).log10();
        let n = (decades * 20.0).ceil() as usize;
        for k in 0..=n {
            let x = lo as f64 * 10f64.powf(decades * k as f64 / n.max(1) as f64);
            out.push((x.round() as u64).clamp(lo, hi));
        }
    } else {
        let n = (hi - lo).min(1000);
        for k in 0..=n {
            out.push(lo + ((hi - lo) as u128 * k as u128 / n.max(1) as u128) as u64);
        }
    }
    out.push(hi);
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub const ACCESS_CSV_HEADER: &str =
    "batch,moe_layer_elems,ultramem_layer_elems,moe_total_elems,ultramem_total_elems,moe_total_bytes,ultramem_total_bytes";

pub fn access_csv(s: &CostScenario, batches: &[u64]) -> String {
    let mut out = format!("{ACCESS_CSV_HEADER}\n");
    for &b in batches {
        let sb = s.with_batch(b);
        let (mt, ut) = (moe_access_total(&sb), ultramem_access_total(&sb));
        writeln!(
            out,
            "{b},{},{},{mt},{ut},{},{}",
            moe_access(&sb),
            ultramem_access(&sb),
            mt * VALUE_BYTES,
            ut * VALUE_BYTES
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScenario {
    pub devices: u64,
    pub bs: u64,
    pub topm: u64,
    pub v_dim: u64,
}

impl PartitionScenario {
    pub fn validate(&self) -> Result<()> {
        if self.devices < 2 || self.bs == 0 || self.topm == 0 || self.v_dim == 0 {
            return Err(Error::config("partition scenario needs P >= 2 and positive bs, topm, v_dim"));
        }
        Ok(())
    }
}

/// Bytes moved when the table is sharded by rows: indices go out all-to-all
/// and retrieved values come back all-to-all.
pub fn numberwise_comm(p: &PartitionScenario) -> f64 {
    let (n, bs, m, v) = (p.devices as u128, p.bs as u128, p.topm as u128, p.v_dim as u128);
    let numer = INDEX_BYTES * bs * m * (n - 1) + VALUE_BYTES * bs * m * v * (n - 1);
    numer as f64 / n as f64
}

/// Bytes moved when the table is sharded by columns: indices and scores are
/// all-gathered and the pooled partial outputs are exchanged.
pub fn dimensionwise_comm(p: &PartitionScenario) -> f64 {
    let (n, bs, m, v) = (p.devices as u128, p.bs as u128, p.topm as u128, p.v_dim as u128);
    let gathered = (INDEX_BYTES + VALUE_BYTES) * bs * m * (n - 1);
    let pooled = VALUE_BYTES * bs * v * (n - 1);
    gathered as f64 + pooled as f64 / n as f64
}

/// Value width at which both partitionings move the same bytes; above it
/// the dimension-wise layout is cheaper. `None` when no positive solution
/// exists.
pub fn ratio_boundary(topm: u64, devices: u64) -> Option<f64> {
    if topm <= 1 || devices < 2 {
        return None;
    }
    Some(topm as f64 * (3 * devices - 2) as f64 / (topm - 1) as f64)
}

pub const BOUNDARY_CSV_HEADER: &str = "devices,v_dim,numberwise_bytes,dimensionwise_bytes,cheaper,boundary_v_dim";

/// One row per `(P, v_dim)` grid point with the closed-form boundary for `P`.
pub fn boundary_csv(topm: u64, bs: u64, devices: &[u64], v_dims: &[u64]) -> String {
    let mut out = format!("{BOUNDARY_CSV_HEADER}\n");
    for &p in devices {
        let boundary = ratio_boundary(topm, p).map_or("none".to_string(), |v| format!("{v:.4}"));
        for &v in v_dims {
            let sc = PartitionScenario {
                devices: p,
                bs,
                topm,
                v_dim: v,
            };
            let (nw, dw) = (numberwise_comm(&sc), dimensionwise_comm(&sc));
            let cheaper = if nw < dw {
                "numberwise"
            } else if dw < nw {
                "dimensionwise"
            } else {
                "equal"
            };
            writeln!(out, "{p},{v},{nw},{dw},{cheaper},{boundary}").unwrap();
        }
    }
    out
}

/// Geometric grid of integers from `lo` to `hi` with powers of two inside.
pub fn pow2_range(lo: u64, hi: u64) -> Result<Vec<u64>> {
    if lo == 0 || hi < lo {
        return Err(Error::arg(format!("range {lo}..{hi} must satisfy 1 <= lo <= hi")));
    }
    let mut out = vec![lo];
    let mut x = lo.next_power_of_two();
    while x < hi {
        if x > lo {
            out.push(x);
        }
        x *= 2;
    }
    if hi > lo {
        out.push(hi);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        let s = CostScenario::analog_1p6b();
        assert_eq!(moe_access(&s), 285_212_672);
        assert_eq!(ultramem_access(&s), 5_505_024);
        assert!(moe_access(&s) > 50 * ultramem_access(&s));
        let one = s.with_batch(1);
        assert_eq!(moe_access(&one), 2 * 2 * 2048 * 2048);
        let loose = CostScenario {
            compact_experts: false,
            ..s.clone()
        };
        assert_eq!(moe_access(&loose), 2 * moe_access(&s));
    }

    #[test]
    fn crossover_of_analog() {
        let s = CostScenario::analog_1p6b();
        let c = crossover_batch(&s);
        assert_eq!(c, crossover_linear_scan(&s));
        match c {
            Crossover::At(b) => assert!(b > 10_000, "{b}"),
            Crossover::Never => panic!("no crossover"),
        }
    }

    #[test]
    fn degenerate_crossovers() {
        let equal = CostScenario {
            d_model: 4,
            batch: 1,
            topm: 32,
            slots: 1 << 20,
            experts: 1 << 16,
            moe_layers: 1,
            memory_layers: 1,
            compact_experts: true,
        };
        assert_eq!(ultramem_access(&equal), moe_access(&equal));
        assert_eq!(crossover_batch(&equal), Crossover::At(1));
        let dominated = CostScenario {
            slots: 4,
            ..equal.clone()
        };
        assert_eq!(crossover_batch(&dominated), Crossover::Never);
        assert_eq!(crossover_linear_scan(&dominated), Crossover::Never);
    }

    #[test]
    fn partition_examples() {
        let p = PartitionScenario {
            devices: 2,
            bs: 1,
            topm: 1,
            v_dim: 4,
        };
        assert_eq!(numberwise_comm(&p), 6.0);
        assert_eq!(dimensionwise_comm(&p), 10.0);
        assert_eq!(ratio_boundary(1, 2), None);
        assert_eq!(ratio_boundary(4, 2), Some(4.0 * 4.0 / 3.0));
    }

    #[test]
    fn sweeps() {
        assert_eq!(sweep_points(1, 1, true).unwrap(), vec![1]);
        let pts = sweep_points(1, 1_000_000, true).unwrap();
        assert_eq!((pts[0], *pts.last().unwrap()), (1, 1_000_000));
        assert!(pts.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(pow2_range(2, 64).unwrap(), vec![2, 4, 8, 16, 32, 64]);
        assert_eq!(pow2_range(8, 1000).unwrap(), vec![8, 16, 32, 64, 128, 256, 512, 1000]);
        let csv = access_csv(&CostScenario::analog_1p6b(), &[1]);
        assert_eq!(csv.lines().count(), 2);
    }
}
