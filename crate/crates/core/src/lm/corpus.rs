//! Byte-level corpora: a deterministic English-like text generator and
//! train/validation batching.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::{BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::stream_rng;

const SUBJECTS: &[&str] = &[
    "the old sailor", "a young farmer", "the miller", "my grandmother", "the quiet child", "a travelling merchant",
    "the village priest", "our neighbour", "the blacksmith", "a tired soldier", "the shepherd", "the king",
    "a clever fox", "the river", "the north wind", "every stranger", "the baker's daughter", "the captain",
];
const VERBS: &[&str] = &[
    "walked toward", "looked at", "remembered", "carried", "followed", "found", "spoke of", "waited for",
    "sang about", "left behind", "built", "watched", "painted", "forgot", "dreamed of", "counted",
];
const OBJECTS: &[&str] = &[
    "the harbour", "a small boat", "the wooden bridge", "the long road", "an empty house", "the market square",
    "a field of barley", "the stone wall", "the evening bells", "a letter from home", "the dark forest",
    "the lantern", "a basket of apples", "the winter garden", "the broken cart", "the mountain pass",
];
const ADVERBIALS: &[&str] = &[
    "before the rain", "at first light", "without a word", "in the cold morning", "for many years",
    "after supper", "under the tall trees", "as the sun went down", "with great care", "once again",
    "near the water", "in silence",
];
const CONNECTIVES: &[&str] = &["and then", "but", "while", "because", "so", "although"];

fn sentence(rng: &mut impl Rng) -> String {
    let pick = |rng: &mut dyn rand::RngCore, xs: &[&'static str]| -> &'static str { xs.choose(rng).unwrap() };
    let mut s = format!("{} {} {}", pick(rng, SUBJECTS), pick(rng, VERBS), pick(rng, OBJECTS));
    if rng.gen_bool(0.5) {
        s.push(' ');
        s.push_str(pick(rng, ADVERBIALS));
    }
    if rng.gen_bool(0.3) {
        s = format!(
            "{s}, {} {} {} {}",
            pick(rng, CONNECTIVES),
            pick(rng, SUBJECTS),
            pick(rng, VERBS),
            pick(rng, OBJECTS)
        );
    }
    let mut chars = s.chars();
    let first = chars.next().unwrap().to_ascii_uppercase();
    let end = if rng.gen_bool(0.1) { '?' } else { '.' };
    format!("{first}{}{end}", chars.as_str())
}

/// Deterministic English-like text of exactly `bytes` bytes, in paragraphs
/// separated by blank lines.
pub fn synthetic_text(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = stream_rng(seed, "corpus");
    let mut out = Vec::with_capacity(bytes + 256);
    while out.len() < bytes {
        let n = rng.gen_range(2..7);
        for k in 0..n {
            if k > 0 {
                out.push(b' ');
            }
            out.extend_from_slice(sentence(&mut rng).as_bytes());
        }
        out.extend_from_slice(b"\n\n");
    }
    out.truncate(bytes);
    out
}

/// Token stream with a held-out tail for validation. Paragraphs are wrapped
/// in begin/end markers.
#[derive(Debug, Clone)]
pub struct Corpus {
    train: Vec<usize>,
    valid: Vec<usize>,
}

pub const VALID_FRACTION: f64 = 0.05;

impl Corpus {
    pub fn from_bytes(bytes: &[u8], min_len: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(bytes.len() + bytes.len() / 64);
        tokens.push(BOS);
        let mut k = 0;
        while k < bytes.len() {
            if bytes[k..].starts_with(b"\n\n") {
                tokens.push(EOS);
                tokens.push(BOS);
                k += 2;
            } else {
                tokens.push(bytes[k] as usize);
                k += 1;
            }
        }
        tokens.push(EOS);
        let split = ((tokens.len() as f64) * (1.0 - VALID_FRACTION)) as usize;
        let valid = tokens.split_off(split);
        if tokens.len() < min_len || valid.len() < min_len {
            return Err(Error::config(format!(
                "corpus of {} bytes is too small for windows of {min_len} tokens",
                bytes.len()
            )));
        }
        Ok(Self { train: tokens, valid })
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn valid_len(&self) -> usize {
        self.valid.len()
    }

    /// Random training windows: `(inputs, targets)`, each `batch * seq_len`.
    pub fn train_batch(&self, batch: usize, seq_len: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
        let starts: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..self.train.len() - seq_len)).collect();
        windows(&self.train, &starts, seq_len)
    }

    /// Fixed evenly spaced validation windows, `batch` per call index.
    pub fn valid_batch(&self, index: usize, batch: usize, seq_len: usize) -> (Vec<usize>, Vec<usize>) {
        let span = self.valid.len() - seq_len - 1;
        let starts: Vec<usize> = (0..batch).map(|b| ((index * batch + b) * 7919 * seq_len) % span).collect();
        windows(&self.valid, &starts, seq_len)
    }

    /// Every full validation window in order, for perplexity evaluation.
    pub fn valid_windows(&self, seq_len: usize) -> impl Iterator<Item = (Vec<usize>, Vec<usize>)> + '_ {
        let count = (self.valid.len() - 1) / seq_len;
        (0..count).map(move |k| windows(&self.valid, &[k * seq_len], seq_len))
    }
}

fn windows(tokens: &[usize], starts: &[usize], seq_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut x = Vec::with_capacity(starts.len() * seq_len);
    let mut y = Vec::with_capacity(starts.len() * seq_len);
    for &s in starts {
        x.extend_from_slice(&tokens[s..s + seq_len]);
        y.extend_from_slice(&tokens[s + 1..s + seq_len + 1]);
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_sized() {
        let a = synthetic_text(10_000, 1);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_text(10_000, 1));
        assert_ne!(a, synthetic_text(10_000, 2));
        assert!(a.is_ascii());
    }

    #[test]
    fn batches_shift_targets_by_one() {
        let c = Corpus::from_bytes(&synthetic_text(5_000, 3), 17).unwrap();
        let (x, y) = c.train_batch(2, 16, &mut stream_rng(0, "b"));
        assert_eq!(x.len(), 32);
        assert_eq!(&x[1..16], &y[..15]);
        let (vx, vy) = c.valid_batch(0, 2, 16);
        assert_eq!(&vx[1..16], &vy[..15]);
        assert!(Corpus::from_bytes(b"tiny", 17).is_err());
    }
}
