//! Byte-level transformer language model used to exercise the memory layers.

mod config;
mod corpus;
mod model;
mod optim;
mod schedule;
mod train;

pub use config::{LmConfig, ModelConfig, TrainConfig, Variant, BOS, BYTE_VOCAB, EOS};
pub use corpus::{synthetic_text, Corpus, VALID_FRACTION};
pub use model::{dense_param_count, Block, ForwardOptions, ForwardOut, MemorySlot, Model, ModelVars, ParamInfo};
pub use optim::{clip_scale, AdamW, Moments, Slot};
pub use schedule::{ParamGroup, Schedule};
pub use train::{perplexity, train, write_csv, StepMetrics, Trainer, CSV_HEADER};

use crate::error::{Error, Result};

const PRESETS: &[(&str, &str)] = &[
    ("dense-tiny", include_str!("../../presets/dense-tiny.toml")),
    ("pkm-tiny", include_str!("../../presets/pkm-tiny.toml")),
    ("ultramem-tiny", include_str!("../../presets/ultramem-tiny.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::config(format!("unknown preset `{name}`; known: {}", preset_names().join(", "))))
}

pub fn preset(name: &str) -> Result<LmConfig> {
    LmConfig::from_toml(preset_text(name)?)
}
