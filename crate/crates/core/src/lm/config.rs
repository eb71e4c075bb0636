use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ultramem::UltraMemConfig;

pub const BYTE_VOCAB: usize = 258;
pub const BOS: usize = 256;
pub const EOS: usize = 257;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dense,
    Pkm,
    Ultramem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub d_model: usize,
    pub attn_heads: usize,
    pub mlp_dim: usize,
    #[serde(default = "byte_vocab")]
    pub vocab: usize,
    /// Memory placements `(a, b)`: read after block `a`, add after block `b`.
    #[serde(default)]
    pub spans: Vec<(usize, usize)>,
    /// Run single-block memories off the MLP input, in parallel with the MLP.
    #[serde(default)]
    pub memory_parallel: bool,
    #[serde(default)]
    pub dropout: f64,
}

fn byte_vocab() -> usize {
    BYTE_VOCAB
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    /// Multiplier on the value-table learning rate at step 0; decays linearly to 1.
    #[serde(default = "ten")]
    pub value_lr_start: f64,
    #[serde(default = "warmup")]
    pub warmup_ratio: f64,
    #[serde(default = "end_ratio")]
    pub end_ratio: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "one")]
    pub grad_clip: f64,
    #[serde(default = "eval_every")]
    pub eval_every: usize,
    #[serde(default = "eval_batches")]
    pub eval_batches: usize,
    /// Size of the generated corpus in bytes when no corpus file is given.
    #[serde(default = "corpus_bytes")]
    pub corpus_bytes: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn ten() -> f64 {
    10.0
}
fn warmup() -> f64 {
    0.01
}
fn end_ratio() -> f64 {
    0.1
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.95
}
fn weight_decay() -> f64 {
    0.1
}
fn one() -> f64 {
    1.0
}
fn eval_every() -> usize {
    200
}
fn eval_batches() -> usize {
    4
}
fn corpus_bytes() -> usize {
    1 << 20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub memory: Option<UltraMemConfig>,
    pub train: TrainConfig,
}

impl LmConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: LmConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Fills memory fields derived from the host model.
    pub fn resolve(&mut self) {
        let (d, l) = (self.model.d_model, self.model.layers);
        if let Some(m) = self.memory.as_mut() {
            m.d_model = d;
            m.layers = l;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("model.layers", m.layers),
            ("model.d_model", m.d_model),
            ("model.attn_heads", m.attn_heads),
            ("model.mlp_dim", m.mlp_dim),
            ("train.steps", self.train.steps),
            ("train.batch", self.train.batch),
            ("train.seq_len", self.train.seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if m.vocab < BYTE_VOCAB {
            return Err(Error::config(format!("model.vocab must be at least {BYTE_VOCAB}")));
        }
        if m.d_model % m.attn_heads != 0 || (m.d_model / m.attn_heads) % 2 != 0 {
            return Err(Error::config("model.d_model / model.attn_heads must be a positive even integer"));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::config("model.dropout must lie in [0, 1)"));
        }
        let mut prev_end = 0;
        let mut spans = m.spans.clone();
        spans.sort();
        for &(a, b) in &spans {
            if a < 1 || a > b || b > m.layers {
                return Err(Error::config(format!(
                    "memory span ({a}, {b}) must satisfy 1 <= a <= b <= {}",
                    m.layers
                )));
            }
            if a <= prev_end && prev_end > 0 {
                return Err(Error::config(format!("memory span ({a}, {b}) overlaps another span")));
            }
            prev_end = b;
        }
        match (m.variant, &self.memory) {
            (Variant::Dense, _) if !m.spans.is_empty() => {
                return Err(Error::config("a dense model cannot have memory spans"))
            }
            (Variant::Dense, _) => {}
            (_, None) => return Err(Error::config("memory variants need a [memory] section")),
            (_, Some(_)) if m.spans.is_empty() => {
                return Err(Error::config("memory variants need at least one span"))
            }
            (_, Some(mem)) => mem.validate()?,
        }
        if m.memory_parallel && m.spans.iter().any(|(a, b)| a != b) {
            return Err(Error::config("model.memory_parallel requires spans with a = b"));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.value_lr_start >= 1.0 && t.grad_clip > 0.0) {
            return Err(Error::config("train.lr and train.grad_clip must be positive, train.value_lr_start >= 1"));
        }
        if !(0.0..1.0).contains(&t.warmup_ratio) || !(0.0..=1.0).contains(&t.end_ratio) {
            return Err(Error::config("train.warmup_ratio must lie in [0, 1) and train.end_ratio in [0, 1]"));
        }
        if t.corpus_bytes < 16 * (t.seq_len + 1) {
            return Err(Error::config("train.corpus_bytes is too small for the sequence length"));
        }
        Ok(())
    }
}
