//! The composed memory layer: causal depthwise convolution, a single shared
//! query, normalized queries and keys, tucker-decomposed retrieval, implicit
//! value expansion with multi-core scoring, and an output projection.
//!
//! Product-key (additive) retrieval with softmax weighting is available
//! through the same layer so the baseline and the full layer share code.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::pkm::{two_phase_topm, CandidateSet};
use crate::select::top_m_indices;
use crate::tensor::{stream_rng, Precision, Tensor};
use crate::tucker::{approx_topm_retrieve_with, RetrieveOptions, Selection, TuckerCore};
use crate::virtual_memory::{grid_side, ShuffleMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retrieval {
    /// Bilinear grid scores through learnable cores.
    #[default]
    Tucker,
    /// Product-key scores `s_row[i] + s_col[j]`.
    Additive,
}

/// How the query normalization gain is chosen at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainCalibration {
    /// Measure the mean score weighting each retrieved value chunk in the
    /// freshly initialized layer on unit-Gaussian probe inputs.
    #[default]
    Probe,
    /// Monte-Carlo mean of the top-m of `m^2` standard Gaussian draws.
    GaussianTopM,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UltraMemConfig {
    /// Hidden size of the host model.
    #[serde(default)]
    pub d_model: usize,
    pub d_key: usize,
    pub d_value: usize,
    /// Width of the virtual values; defaults to `d_value`.
    #[serde(default)]
    pub d_virtual: Option<usize>,
    /// Physical grid side; the value table holds `side^2` rows.
    pub side: usize,
    /// Values retrieved per head and token.
    pub topm: usize,
    pub heads: usize,
    #[serde(default = "one")]
    pub rank: usize,
    #[serde(default = "one")]
    pub cores: usize,
    #[serde(default = "one")]
    pub expansion: usize,
    #[serde(default)]
    pub aux_alpha: f64,
    #[serde(default)]
    pub aux_tau: f64,
    #[serde(default = "three")]
    pub conv_width: usize,
    /// Transformer depth used by the initialization targets.
    #[serde(default)]
    pub layers: usize,
    #[serde(default)]
    pub retrieval: Retrieval,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub softmax: bool,
    #[serde(default = "yes")]
    pub query_conv: bool,
    #[serde(default = "yes")]
    pub query_norm: bool,
    #[serde(default = "yes")]
    pub key_norm: bool,
    #[serde(default = "yes")]
    pub value_projection: bool,
    #[serde(default = "yes")]
    pub out_proj: bool,
    #[serde(default)]
    pub gain_calibration: GainCalibration,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn yes() -> bool {
    true
}

impl UltraMemConfig {
    /// A tucker-retrieval layer with every trick enabled.
    pub fn tucker(d_model: usize, d_key: usize, d_value: usize, side: usize, topm: usize, heads: usize) -> Self {
        Self {
            d_model,
            d_key,
            d_value,
            d_virtual: None,
            side,
            topm,
            heads,
            rank: 2,
            cores: 2,
            expansion: 4,
            aux_alpha: 0.001,
            aux_tau: 0.15,
            conv_width: 3,
            layers: 1,
            retrieval: Retrieval::Tucker,
            selection: Selection::ProductAware,
            softmax: false,
            query_conv: true,
            query_norm: true,
            key_norm: true,
            value_projection: true,
            out_proj: true,
            gain_calibration: GainCalibration::Probe,
        }
    }

    pub fn slots(&self) -> usize {
        self.side * self.side
    }

    pub fn virtual_dim(&self) -> usize {
        self.d_virtual.unwrap_or(self.d_value)
    }

    /// Side of the logical grid over the `expansion * slots` virtual addresses.
    pub fn grid_side(&self) -> usize {
        grid_side(self.expansion, self.slots())
    }

    /// Width of the pooled vector handed to the output projection.
    pub fn pooled_dim(&self) -> usize {
        if self.value_projection {
            self.virtual_dim()
        } else {
            self.d_value
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_key", self.d_key),
            ("d_value", self.d_value),
            ("side", self.side),
            ("topm", self.topm),
            ("heads", self.heads),
            ("rank", self.rank),
            ("cores", self.cores),
            ("expansion", self.expansion),
            ("conv_width", self.conv_width),
            ("layers", self.layers),
            ("d_virtual", self.virtual_dim()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("memory.{name} must be positive")));
            }
        }
        if self.d_key % self.rank != 0 {
            return Err(Error::config(format!(
                "memory.d_key {} is not divisible by rank {}",
                self.d_key, self.rank
            )));
        }
        if self.d_value % self.cores != 0 {
            return Err(Error::config(format!(
                "memory.d_value {} is not divisible by cores {}",
                self.d_value, self.cores
            )));
        }
        if self.topm > self.grid_side() {
            return Err(Error::config(format!(
                "memory.topm {} exceeds the grid side {}",
                self.topm,
                self.grid_side()
            )));
        }
        if self.retrieval == Retrieval::Additive && (self.rank != 1 || self.cores != 1 || self.expansion != 1) {
            return Err(Error::config("additive retrieval requires rank = cores = expansion = 1"));
        }
        if !self.value_projection && (self.expansion != 1 || self.virtual_dim() != self.d_value) {
            return Err(Error::config("memory.value_projection = false requires expansion 1 and d_virtual = d_value"));
        }
        if !self.out_proj && self.pooled_dim() != self.d_model {
            return Err(Error::config("memory.out_proj = false requires the pooled width to equal d_model"));
        }
        if !(self.aux_alpha >= 0.0 && self.aux_tau >= 0.0) {
            return Err(Error::config("memory.aux_alpha and memory.aux_tau must be non-negative"));
        }
        Ok(())
    }

    /// Standard deviation of the value-table initialization, `sqrt(E / (2 m H L))`.
    pub fn value_init_std(&self) -> f64 {
        (self.expansion as f64 / (2.0 * (self.topm * self.heads * self.layers) as f64)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub k_row: Tensor,
    pub k_col: Tensor,
    pub k_gain: Option<Tensor>,
    /// Component cores (tucker retrieval only).
    pub cores: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UltraMemParams {
    pub conv: Option<Tensor>,
    pub query: Tensor,
    pub q_gain: Option<Tensor>,
    pub heads: Vec<HeadParams>,
    pub values: Tensor,
    pub projectors: Vec<Tensor>,
    pub out_proj: Option<Tensor>,
}

impl UltraMemParams {
    /// Every tensor with its name, in binding order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(c) = &self.conv {
            out.push(("conv".to_string(), c));
        }
        out.push(("query".to_string(), &self.query));
        if let Some(gn) = &self.q_gain {
            out.push(("q_gain".to_string(), gn));
        }
        for (h, head) in self.heads.iter().enumerate() {
            out.push((format!("head{h}.k_row"), &head.k_row));
            out.push((format!("head{h}.k_col"), &head.k_col));
            if let Some(gn) = &head.k_gain {
                out.push((format!("head{h}.k_gain"), gn));
            }
            for (c, core) in head.cores.iter().enumerate() {
                out.push((format!("head{h}.core{c}"), core));
            }
        }
        out.push(("values".to_string(), &self.values));
        for (p, w) in self.projectors.iter().enumerate() {
            out.push((format!("proj{p}"), w));
        }
        if let Some(o) = &self.out_proj {
            out.push(("out_proj".to_string(), o));
        }
        out
    }

    /// Mutable tensors in the same order as [`UltraMemParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.conv.as_mut());
        out.push(&mut self.query);
        out.extend(self.q_gain.as_mut());
        for head in &mut self.heads {
            out.push(&mut head.k_row);
            out.push(&mut head.k_col);
            out.extend(head.k_gain.as_mut());
            out.extend(head.cores.iter_mut());
        }
        out.push(&mut self.values);
        out.extend(self.projectors.iter_mut());
        out.extend(self.out_proj.as_mut());
        out
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> LayerVars {
        self.bind_with(g, true)
    }

    pub fn bind_with(&self, g: &mut Graph, trainable: bool) -> LayerVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        LayerVars {
            conv: self.conv.as_ref().map(&mut leaf),
            query: leaf(&self.query),
            q_gain: self.q_gain.as_ref().map(&mut leaf),
            heads: self
                .heads
                .iter()
                .map(|h| HeadVars {
                    k_row: leaf(&h.k_row),
                    k_col: leaf(&h.k_col),
                    k_gain: h.k_gain.as_ref().map(&mut leaf),
                    cores: h.cores.iter().map(&mut leaf).collect(),
                })
                .collect(),
            values: leaf(&self.values),
            projectors: self.projectors.iter().map(&mut leaf).collect(),
            out_proj: self.out_proj.as_ref().map(&mut leaf),
        }
    }

    /// Rebuilds handles from existing nodes listed in [`UltraMemParams::tensors`] order.
    pub fn vars_from(&self, vars: &[Var]) -> Result<LayerVars> {
        if vars.len() != self.tensors().len() {
            return Err(Error::arg(format!(
                "{} handles for {} layer tensors",
                vars.len(),
                self.tensors().len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("counted");
        Ok(LayerVars {
            conv: self.conv.as_ref().map(|_| next()),
            query: next(),
            q_gain: self.q_gain.as_ref().map(|_| next()),
            heads: self
                .heads
                .iter()
                .map(|h| HeadVars {
                    k_row: next(),
                    k_col: next(),
                    k_gain: h.k_gain.as_ref().map(|_| next()),
                    cores: h.cores.iter().map(|_| next()).collect(),
                })
                .collect(),
            values: next(),
            projectors: self.projectors.iter().map(|_| next()).collect(),
            out_proj: self.out_proj.as_ref().map(|_| next()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub k_row: Var,
    pub k_col: Var,
    pub k_gain: Option<Var>,
    pub cores: Vec<Var>,
}

/// Graph handles of one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub conv: Option<Var>,
    pub query: Var,
    pub q_gain: Option<Var>,
    pub heads: Vec<HeadVars>,
    pub values: Var,
    pub projectors: Vec<Var>,
    pub out_proj: Option<Var>,
}

impl LayerVars {
    /// Handles in the order of [`UltraMemParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend(self.conv);
        out.push(self.query);
        out.extend(self.q_gain);
        for h in &self.heads {
            out.push(h.k_row);
            out.push(h.k_col);
            out.extend(h.k_gain);
            out.extend(h.cores.iter().copied());
        }
        out.push(self.values);
        out.extend(self.projectors.iter().copied());
        out.extend(self.out_proj);
        out
    }
}

/// Retrieval statistics of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RetrievalStats {
    /// Mean over tokens and heads of the best selection score.
    pub top1_mean: f64,
    /// Mean over all selected cells of the selection score.
    pub selected_mean: f64,
    /// Mean of the raw scores that weight value chunks.
    pub weight_mean: f64,
}

#[derive(Debug, Clone)]
pub struct MemoryOutput {
    pub out: Var,
    /// Summed singular-value penalty over heads; `None` when not applicable.
    pub aux: Option<Var>,
    pub stats: RetrievalStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UltraMemLayer {
    pub cfg: UltraMemConfig,
    pub params: UltraMemParams,
    pub shuffle: ShuffleMap,
}

impl UltraMemLayer {
    /// Forward over `[batch * seq_len, d_model]` hidden states.
    pub fn forward(&self, g: &mut Graph, vars: &LayerVars, x: Var, seq_len: usize) -> Result<MemoryOutput> {
        let cfg = &self.cfg;
        let (tokens, width) = g.value(x).rows_cols();
        if width != cfg.d_model {
            return Err(Error::shape("ultramem", g.shape(x), &[tokens, cfg.d_model]));
        }
        let xq = match vars.conv {
            Some(k) => g.causal_conv(x, k, seq_len)?,
            None => x,
        };
        let mut q = g.matmul(xq, vars.query)?;
        if let Some(gain) = vars.q_gain {
            q = g.layer_norm(q, gain)?;
        }
        let n = cfg.grid_side();
        let limit = cfg.expansion * cfg.slots();
        let mut pooled: Option<Var> = None;
        let mut aux: Option<Var> = None;
        let mut top1 = 0.0;
        let mut selected = 0.0;
        let mut weights = 0.0;
        for head in &vars.heads {
            let norm = |g: &mut Graph, k: Var| -> Result<Var> {
                match head.k_gain {
                    Some(gain) => g.layer_norm(k, gain),
                    None => Ok(k),
                }
            };
            let kr = norm(g, head.k_row)?;
            let kc = norm(g, head.k_col)?;
            let s_row = g.rank_scores(q, kr, cfg.rank)?;
            let s_col = g.rank_scores(q, kc, cfg.rank)?;

            let aggregate = match cfg.retrieval {
                Retrieval::Tucker => {
                    let mut sum = vec![0.0; cfg.rank * cfg.rank];
                    for c in &head.cores {
                        sum.iter_mut().zip(g.value(*c).data()).for_each(|(s, v)| *s += v);
                    }
                    Some(TuckerCore::new(Tensor::new(&[cfg.rank, cfg.rank], sum)?)?)
                }
                Retrieval::Additive => None,
            };
            let sets = select_all(
                g.value(s_row),
                g.value(s_col),
                aggregate.as_ref(),
                cfg.topm,
                RetrieveOptions {
                    selection: cfg.selection,
                    limit: Some(limit),
                },
            )?;
            let mut cells = Vec::with_capacity(tokens * cfg.topm);
            let mut slots = Vec::with_capacity(tokens * cfg.topm);
            for set in &sets {
                top1 += set.entries[0].score;
                for c in &set.entries {
                    selected += c.score;
                    cells.push((c.row, c.col));
                    slots.push(self.shuffle.resolve(c.index)?);
                }
            }
            debug_assert!(cells.iter().all(|&(i, j)| n * i + j < limit));

            let mut scores = match cfg.retrieval {
                Retrieval::Tucker => head
                    .cores
                    .iter()
                    .map(|c| g.bilinear_cells(s_row, s_col, *c, cfg.rank, &cells))
                    .collect::<Result<Vec<_>>>()?,
                Retrieval::Additive => vec![g.additive_cells(s_row, s_col, &cells)?],
            };
            for sv in &scores {
                weights += g.value(*sv).mean() / (scores.len() as f64);
            }
            if cfg.softmax {
                scores = scores.into_iter().map(|s| g.softmax(s)).collect();
            }
            let p = g.block_pool(&scores, vars.values, &slots, cfg.expansion)?;
            pooled = Some(match pooled {
                Some(acc) => g.add(acc, p)?,
                None => p,
            });

            if cfg.retrieval == Retrieval::Tucker && cfg.rank >= 2 {
                let mut core = head.cores[0];
                for c in &head.cores[1..] {
                    core = g.add(core, *c)?;
                }
                let loss = g.aux_loss(core, cfg.aux_alpha, cfg.aux_tau)?;
                aux = Some(match aux {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
        }
        let pooled = pooled.ok_or_else(|| Error::config("memory layer has no heads"))?;
        let mut y = if vars.projectors.is_empty() {
            pooled
        } else {
            let w = g.concat_rows(&vars.projectors)?;
            g.matmul(pooled, w)?
        };
        if let Some(o) = vars.out_proj {
            y = g.matmul(y, o)?;
        }
        let heads = vars.heads.len() as f64;
        Ok(MemoryOutput {
            out: y,
            aux,
            stats: RetrievalStats {
                top1_mean: top1 / (tokens as f64 * heads),
                selected_mean: selected / (tokens as f64 * heads * cfg.topm as f64),
                weight_mean: weights / heads,
            },
        })
    }

    /// Convenience forward on a plain tensor with frozen parameters.
    pub fn apply(&self, x: &Tensor, seq_len: usize, precision: Precision) -> Result<(Tensor, RetrievalStats)> {
        let mut g = Graph::new(precision);
        let vars = self.params.bind_with(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, xv, seq_len)?;
        Ok((g.value(out.out).clone(), out.stats))
    }
}

/// Runs candidate selection for every token. Score tensors are `[T, r * n]`.
pub fn select_all(
    s_row: &Tensor,
    s_col: &Tensor,
    core: Option<&TuckerCore>,
    m: usize,
    opts: RetrieveOptions,
) -> Result<Vec<CandidateSet>> {
    let (tokens, width) = s_row.rows_cols();
    (0..tokens)
        .map(|t| {
            let (sr, sc) = (s_row.row(t), s_col.row(t));
            match core {
                Some(c) => approx_topm_retrieve_with(sr, sc, c, m, opts),
                None => {
                    if let Some(limit) = opts.limit {
                        if limit < width * width {
                            return Err(Error::config("additive retrieval does not support padded grids"));
                        }
                    }
                    two_phase_topm(sr, sc, m)
                }
            }
        })
        .collect()
}

/// Monte-Carlo mean of the average of the `m` largest of `n_pts` standard
/// Gaussian draws, over `trials` trials.
pub fn estimate_topm_mean(n_pts: usize, m: usize, trials: usize, seed: u64) -> Result<f64> {
    if m == 0 || m > n_pts || trials == 0 {
        return Err(Error::arg(format!(
            "top-m mean needs 1 <= m <= n_pts and trials > 0, got m={m}, n_pts={n_pts}, trials={trials}"
        )));
    }
    let mut rng = stream_rng(seed, "topm-mean");
    let mut draws = vec![0.0; n_pts];
    let mut total = 0.0;
    for _ in 0..trials {
        for d in draws.iter_mut() {
            *d = rng.sample(StandardNormal);
        }
        let sum: f64 = if m == n_pts {
            draws.iter().sum()
        } else {
            top_m_indices(&draws, m)?.iter().map(|&i| draws[i]).sum()
        };
        total += sum / m as f64;
    }
    Ok(total / trials as f64)
}

const CORE_NOISE_STD: f64 = 0.01;
const CONV_NOISE_STD: f64 = 0.01;
const PROBE_TOKENS: usize = 512;

/// Initializes a layer. Tensors draw from per-name random streams under
/// `prefix`, so the same seed always reproduces the same layer.
pub fn init_parameters(cfg: &UltraMemConfig, seed: u64, prefix: &str) -> Result<UltraMemLayer> {
    cfg.validate()?;
    let rng = |name: &str| stream_rng(seed, &format!("{prefix}.{name}"));
    let (di, dk, dv) = (cfg.d_model, cfg.d_key, cfg.d_value);
    let n = cfg.grid_side();
    let r = cfg.rank;

    let conv = cfg.query_conv.then(|| {
        let mut k = Tensor::randn(&[cfg.conv_width, di], CONV_NOISE_STD, &mut rng("conv"));
        k.data_mut()[..di].iter_mut().for_each(|v| *v += 1.0);
        k
    });
    let query = Tensor::randn(&[di, dk], (1.0 / di as f64).sqrt(), &mut rng("query"));
    let k_gain = 1.0 / (dk as f64).sqrt();

    let base_core = {
        let mut c = Tensor::randn(&[r, r], 0.5 / r as f64, &mut rng("core"));
        c.data_mut().iter_mut().for_each(|v| *v += 0.5);
        c
    };
    let heads = (0..cfg.heads)
        .map(|h| {
            let cores = match cfg.retrieval {
                Retrieval::Tucker => (0..cfg.cores)
                    .map(|c| {
                        let mut t = Tensor::randn(&[r, r], CORE_NOISE_STD, &mut rng(&format!("head{h}.core{c}")));
                        t.data_mut()
                            .iter_mut()
                            .zip(base_core.data())
                            .for_each(|(v, b)| *v += b / cfg.cores as f64);
                        t
                    })
                    .collect(),
                Retrieval::Additive => Vec::new(),
            };
            HeadParams {
                k_row: Tensor::randn(&[n, dk], 1.0, &mut rng(&format!("head{h}.k_row"))),
                k_col: Tensor::randn(&[n, dk], 1.0, &mut rng(&format!("head{h}.k_col"))),
                k_gain: cfg.key_norm.then(|| Tensor::full(&[1], k_gain)),
                cores,
            }
        })
        .collect();
    let values = Tensor::randn(&[cfg.slots(), dv], cfg.value_init_std(), &mut rng("values"));
    let projectors = if cfg.value_projection {
        let std = (1.0 / (cfg.expansion * dv) as f64).sqrt();
        (0..cfg.expansion)
            .map(|p| Tensor::randn(&[dv, cfg.virtual_dim()], std, &mut rng(&format!("proj{p}"))))
            .collect()
    } else {
        Vec::new()
    };
    let out_proj = cfg.out_proj.then(|| {
        let d = cfg.pooled_dim();
        Tensor::randn(&[d, di], (1.0 / d as f64).sqrt(), &mut rng("out_proj"))
    });
    let shuffle = ShuffleMap::new(seed ^ fnv(prefix), cfg.expansion, cfg.slots());
    let mut layer = UltraMemLayer {
        cfg: cfg.clone(),
        params: UltraMemParams {
            conv,
            query,
            q_gain: cfg.query_norm.then(|| Tensor::full(&[1], 1.0)),
            heads,
            values,
            projectors,
            out_proj,
        },
        shuffle,
    };
    if cfg.query_norm && cfg.retrieval == Retrieval::Tucker {
        let mean = match cfg.gain_calibration {
            GainCalibration::Probe => {
                let x = Tensor::randn(&[PROBE_TOKENS, di], 1.0, &mut rng("probe"));
                layer.apply(&x, PROBE_TOKENS, Precision::F64)?.1.weight_mean
            }
            GainCalibration::GaussianTopM => estimate_topm_mean(cfg.topm * cfg.topm, cfg.topm, 10_000, seed)?,
        };
        if mean.is_finite() && mean > 0.0 {
            layer.params.q_gain = Some(Tensor::full(&[1], 1.0 / mean.sqrt()));
        }
    }
    Ok(layer)
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Parameter counts by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamAudit {
    pub conv: usize,
    pub query: usize,
    pub norms: usize,
    pub keys: usize,
    pub cores: usize,
    pub values: usize,
    pub projectors: usize,
    pub out_proj: usize,
}

impl ParamAudit {
    pub fn total(&self) -> usize {
        self.conv + self.query + self.norms + self.keys + self.cores + self.values + self.projectors + self.out_proj
    }
}

/// Closed-form parameter counts of a layer.
pub fn param_audit(cfg: &UltraMemConfig) -> ParamAudit {
    let n = cfg.grid_side();
    let cores = match cfg.retrieval {
        Retrieval::Tucker => cfg.heads * cfg.cores * cfg.rank * cfg.rank,
        Retrieval::Additive => 0,
    };
    ParamAudit {
        conv: if cfg.query_conv { cfg.conv_width * cfg.d_model } else { 0 },
        query: cfg.d_model * cfg.d_key,
        norms: usize::from(cfg.query_norm) + if cfg.key_norm { cfg.heads } else { 0 },
        keys: cfg.heads * 2 * n * cfg.d_key,
        cores,
        values: cfg.slots() * cfg.d_value,
        projectors: if cfg.value_projection {
            cfg.expansion * cfg.d_value * cfg.virtual_dim()
        } else {
            0
        },
        out_proj: if cfg.out_proj { cfg.pooled_dim() * cfg.d_model } else { 0 },
    }
}

/// Multiply-accumulate operations per token.
pub fn flops_per_token(cfg: &UltraMemConfig) -> usize {
    let n = cfg.grid_side();
    let conv = if cfg.query_conv { cfg.conv_width * cfg.d_model } else { 0 };
    let query = cfg.d_model * cfg.d_key;
    let scoring = cfg.heads * 2 * n * cfg.d_key;
    let cells = cfg.heads * cfg.topm;
    let rescoring = cells * cfg.cores * cfg.rank * (cfg.rank + 1);
    let pooling = cells * cfg.d_value;
    let projection = if cfg.value_projection {
        cfg.expansion * cfg.d_value * cfg.virtual_dim()
    } else {
        0
    };
    let out = if cfg.out_proj { cfg.pooled_dim() * cfg.d_model } else { 0 };
    conv + query + scoring + rescoring + pooling + projection + out
}
