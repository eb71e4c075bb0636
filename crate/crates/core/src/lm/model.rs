//! Pre-norm transformer with rotary attention, a GeLU MLP, and optional
//! skip-placed memory layers.

use rand::Rng;

use super::config::{LmConfig, Variant};
use super::schedule::ParamGroup;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{stream_rng, Precision, Tensor};
use crate::ultramem::{init_parameters, LayerVars, RetrievalStats, UltraMemLayer};

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl Block {
    fn tensors(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("ln1", &self.ln1),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2", &self.ln2),
            ("w1", &self.w1),
            ("w2", &self.w2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.ln1,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

/// A memory layer with its input normalization and placement.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlot {
    pub span: (usize, usize),
    pub ln: Tensor,
    pub layer: UltraMemLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: LmConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln: Tensor,
    pub head: Tensor,
    pub memories: Vec<MemorySlot>,
}

/// Describes one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Multiply every memory output by zero before it is added.
    pub zero_memory: bool,
    /// Add a constant to the hidden state right after the given 1-based block.
    pub perturb: Option<(usize, f64)>,
    /// Record hidden states after every block and every memory input.
    pub capture: bool,
    pub train: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub logits: Var,
    pub aux: Option<Var>,
    pub mem_stats: Vec<RetrievalStats>,
    pub mem_out_std: Vec<f64>,
    pub hidden: Vec<Tensor>,
    pub mem_inputs: Vec<Tensor>,
}

/// Closed-form parameter count of the dense transformer.
pub fn dense_param_count(vocab: usize, d: usize, layers: usize, mlp: usize) -> usize {
    2 * vocab * d + layers * (2 * d + 4 * d * d + 2 * d * mlp) + d
}

impl Model {
    pub fn build(cfg: &LmConfig) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.resolve();
        cfg.validate()?;
        let m = &cfg.model;
        let (v, d, f, l) = (m.vocab, m.d_model, m.mlp_dim, m.layers);
        let seed = cfg.seed;
        let randn = |name: &str, shape: &[usize], std: f64| Tensor::randn(shape, std, &mut stream_rng(seed, name));
        let inv = |x: usize| (1.0 / x as f64).sqrt();
        let residual = (1.0 / (2.0 * l as f64)).sqrt();
        let blocks = (1..=l)
            .map(|b| Block {
                ln1: Tensor::full(&[d], 1.0),
                wq: randn(&format!("block{b}.wq"), &[d, d], inv(d)),
                wk: randn(&format!("block{b}.wk"), &[d, d], inv(d)),
                wv: randn(&format!("block{b}.wv"), &[d, d], inv(d)),
                wo: randn(&format!("block{b}.wo"), &[d, d], inv(d) * residual),
                ln2: Tensor::full(&[d], 1.0),
                w1: randn(&format!("block{b}.w1"), &[d, f], inv(d)),
                w2: randn(&format!("block{b}.w2"), &[f, d], inv(f) * residual),
            })
            .collect();
        let memories = match (m.variant, &cfg.memory) {
            (Variant::Dense, _) | (_, None) => Vec::new(),
            (_, Some(mem)) => m
                .spans
                .iter()
                .enumerate()
                .map(|(k, &span)| {
                    Ok(MemorySlot {
                        span,
                        ln: Tensor::full(&[d], 1.0),
                        layer: init_parameters(mem, seed, &format!("mem{k}"))?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            embed: randn("embed", &[v, d], 1.0),
            blocks,
            final_ln: Tensor::full(&[d], 1.0),
            head: randn("head", &[d, v], inv(d)),
            memories,
            cfg,
        })
    }

    pub fn params(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor, group| {
            out.push(ParamInfo {
                name,
                shape: t.shape().to_vec(),
                group,
                decay: t.ndim() >= 2,
            })
        };
        for (name, t) in self.named_tensors() {
            let group = if name.starts_with("mem") && name.ends_with(".values") {
                ParamGroup::Values
            } else {
                ParamGroup::Base
            };
            push(name, t, group);
        }
        out
    }

    /// Every tensor with its name, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (b, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.tensors() {
                out.push((format!("block{}.{name}", b + 1), t));
            }
        }
        out.push(("final_ln".to_string(), &self.final_ln));
        out.push(("head".to_string(), &self.head));
        for (k, mem) in self.memories.iter().enumerate() {
            out.push((format!("mem{k}.ln"), &mem.ln));
            for (name, t) in mem.layer.params.tensors() {
                out.push((format!("mem{k}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        out.push(&mut self.final_ln);
        out.push(&mut self.head);
        for mem in &mut self.memories {
            out.push(&mut mem.ln);
            out.extend(mem.layer.params.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let embed = leaf(&self.embed);
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.tensors().map(|(_, t)| leaf(t)))
            .collect();
        let final_ln = leaf(&self.final_ln);
        let head = leaf(&self.head);
        let mut memories = Vec::new();
        for mem in &self.memories {
            let ln = leaf(&mem.ln);
            memories.push((ln, None));
        }
        for (k, mem) in self.memories.iter().enumerate() {
            memories[k].1 = Some(mem.layer.params.bind_with(g, trainable));
        }
        ModelVars {
            embed,
            blocks,
            final_ln,
            head,
            memories: memories.into_iter().map(|(ln, v)| (ln, v.expect("bound"))).collect(),
        }
    }

    /// Forward over `batch` sequences of `seq_len` tokens, flattened row-major.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        tokens: &[usize],
        seq_len: usize,
        opts: &ForwardOptions,
        rng: &mut impl Rng,
    ) -> Result<ForwardOut> {
        let m = &self.cfg.model;
        if seq_len == 0 || tokens.len() % seq_len != 0 {
            return Err(Error::shape("forward", &[tokens.len()], &[seq_len]));
        }
        let dropout = if opts.train { m.dropout } else { 0.0 };
        let mut h = g.gather_rows(vars.embed, tokens)?;
        let mut out = ForwardOut {
            logits: h,
            aux: None,
            mem_stats: Vec::new(),
            mem_out_std: Vec::new(),
            hidden: Vec::new(),
            mem_inputs: Vec::new(),
        };
        let mut pending: Vec<Option<Var>> = vec![None; self.memories.len()];
        for (l, bv) in vars.blocks.iter().enumerate() {
            let layer = l + 1;
            let [ln1, wq, wk, wv, wo, ln2, w1, w2] = *bv;
            let a = g.layer_norm(h, ln1)?;
            let q = g.matmul(a, wq)?;
            let k = g.matmul(a, wk)?;
            let v = g.matmul(a, wv)?;
            let q = g.rope(q, seq_len, m.attn_heads)?;
            let k = g.rope(k, seq_len, m.attn_heads)?;
            let att = g.attention(q, k, v, seq_len, m.attn_heads)?;
            let att = g.matmul(att, wo)?;
            let att = g.dropout(att, dropout, rng);
            h = g.add(h, att)?;

            let b = g.layer_norm(h, ln2)?;
            let f = g.matmul(b, w1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.dropout(f, dropout, rng);
            let mut parallel = None;
            if m.memory_parallel {
                if let Some(k) = self.memories.iter().position(|s| s.span.0 == layer) {
                    parallel = Some(self.memory(g, vars, k, h, seq_len, opts, &mut out)?);
                }
            }
            h = g.add(h, f)?;
            if let Some(mo) = parallel {
                h = g.add(h, mo)?;
            }
            if let Some((at, delta)) = opts.perturb {
                if at == layer {
                    h = g.add_scalar(h, delta);
                }
            }
            if !m.memory_parallel {
                for (k, slot) in self.memories.iter().enumerate() {
                    if slot.span.0 == layer {
                        pending[k] = Some(self.memory(g, vars, k, h, seq_len, opts, &mut out)?);
                    }
                }
                for (k, slot) in self.memories.iter().enumerate() {
                    if slot.span.1 == layer {
                        if let Some(mo) = pending[k].take() {
                            h = g.add(h, mo)?;
                        }
                    }
                }
            }
            if opts.capture {
                out.hidden.push(g.value(h).clone());
            }
        }
        let hn = g.layer_norm(h, vars.final_ln)?;
        out.logits = g.matmul(hn, vars.head)?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn memory(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        k: usize,
        h: Var,
        seq_len: usize,
        opts: &ForwardOptions,
        out: &mut ForwardOut,
    ) -> Result<Var> {
        let (ln, lv) = &vars.memories[k];
        if opts.capture {
            out.mem_inputs.push(g.value(h).clone());
        }
        let x = g.layer_norm(h, *ln)?;
        let mo = self.memories[k].layer.forward(g, lv, x, seq_len)?;
        out.mem_stats.push(mo.stats);
        out.mem_out_std.push(g.value(mo.out).std());
        if let Some(a) = mo.aux {
            out.aux = Some(match out.aux {
                Some(acc) => g.add(acc, a)?,
                None => a,
            });
        }
        Ok(if opts.zero_memory { g.scale(mo.out, 0.0) } else { mo.out })
    }

    /// Mean next-token loss on fixed inputs without building gradients.
    pub fn eval_loss(&self, tokens: &[usize], targets: &[usize], seq_len: usize, precision: Precision) -> Result<f64> {
        let mut g = Graph::new(precision);
        let vars = self.bind(&mut g, false);
        let mut rng = stream_rng(0, "eval");
        let out = self.forward(&mut g, &vars, tokens, seq_len, &ForwardOptions::default(), &mut rng)?;
        let loss = g.cross_entropy(out.logits, targets)?;
        Ok(g.value(loss).item())
    }
}

/// Graph handles of a model's parameters.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: Var,
    pub blocks: Vec<[Var; 8]>,
    pub final_ln: Var,
    pub head: Var,
    pub memories: Vec<(Var, LayerVars)>,
}

impl ModelVars {
    /// Handles in the order of [`Model::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.final_ln);
        out.push(self.head);
        for (ln, lv) in &self.memories {
            out.push(*ln);
            out.extend(lv.all());
        }
        out
    }
}
