//! Training loop, validation and metric logging.

use std::io::Write;

use rand_chacha::ChaCha8Rng;

use super::config::LmConfig;
use super::corpus::Corpus;
use super::model::{ForwardOptions, Model, ParamInfo};
use super::optim::{clip_scale, AdamW, Moments, Slot};
use super::schedule::{ParamGroup, Schedule};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{stream_rng, Precision};

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lm_loss: f64,
    pub aux_loss: f64,
    pub val_loss: Option<f64>,
    pub top1_score_mean: Option<f64>,
    pub mem_out_std: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub value_lr: f64,
}

pub const CSV_HEADER: &str = "step,lm_loss,aux_loss,val_loss,top1_score_mean,mem_out_std,lr,value_lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6e},{},{},{},{:.6e},{:.6e}",
            self.step,
            self.lm_loss,
            self.aux_loss,
            opt(self.val_loss),
            opt(self.top1_score_mean),
            opt(self.mem_out_std),
            self.lr,
            self.value_lr
        )
    }
}

/// Owns the model, optimizer state and data stream of one run.
pub struct Trainer {
    pub model: Model,
    pub precision: Precision,
    pub step: usize,
    params: Vec<ParamInfo>,
    moments: Vec<Moments>,
    schedule: Schedule,
    opt: AdamW,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &LmConfig, precision: Precision) -> Result<Self> {
        let model = Model::build(cfg)?;
        let params = model.params();
        let moments = params.iter().map(|p| Moments::new(p.shape.iter().product())).collect();
        let t = &model.cfg.train;
        let schedule = Schedule {
            total_steps: t.steps,
            warmup_ratio: t.warmup_ratio,
            end_ratio: t.end_ratio,
            value_start: t.value_lr_start,
        };
        let opt = AdamW {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: 1e-8,
            weight_decay: t.weight_decay,
        };
        Ok(Self {
            rng: stream_rng(model.cfg.seed, "train"),
            model,
            precision,
            step: 0,
            params,
            moments,
            schedule,
            opt,
        })
    }

    pub fn lr(&self, step: usize, group: ParamGroup) -> f64 {
        self.model.cfg.train.lr * self.schedule.lr_at(step, group)
    }

    /// One optimizer step on the given batch.
    pub fn step_on(&mut self, x: &[usize], y: &[usize]) -> Result<StepMetrics> {
        let seq_len = self.model.cfg.train.seq_len;
        let step = self.step;
        let mut g = Graph::new(self.precision);
        let vars = self.model.bind(&mut g, true);
        let opts = ForwardOptions {
            train: true,
            ..ForwardOptions::default()
        };
        let out = self.model.forward(&mut g, &vars, x, seq_len, &opts, &mut self.rng)?;
        let ce = g.cross_entropy(out.logits, y)?;
        let lm_loss = g.value(ce).item();
        let (loss, aux_loss) = match out.aux {
            Some(a) => {
                let v = g.value(a).item();
                (g.add(ce, a)?, v)
            }
            None => (ce, 0.0),
        };
        let all = vars.all();
        if !lm_loss.is_finite() || !aux_loss.is_finite() {
            return Err(self.diverged(step, lm_loss, aux_loss, f64::NAN));
        }
        g.backward(loss)?;
        let grads: Vec<&[f64]> = all.iter().map(|&v| g.grad(v).expect("trainable")).collect();
        let (norm, scale) = clip_scale(&grads, self.model.cfg.train.grad_clip);
        if !norm.is_finite() {
            return Err(self.diverged(step, lm_loss, aux_loss, norm));
        }
        let lr_base = self.lr(step, ParamGroup::Base);
        let lr_values = self.lr(step, ParamGroup::Values);
        let infos = &self.params;
        let slots: Vec<Slot<'_>> = self
            .model
            .tensors_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(infos.iter())
            .map(|((t, g), info)| Slot {
                param: t.data_mut(),
                grad: g,
                group: info.group,
                decay: info.decay,
            })
            .collect();
        let lr_for = |grp| match grp {
            ParamGroup::Base => lr_base,
            ParamGroup::Values => lr_values,
        };
        self.opt.step(step + 1, slots, &mut self.moments, lr_for, scale);
        if self.precision == Precision::F32 {
            for t in self.model.tensors_mut() {
                Precision::F32.round_slice(t.data_mut());
            }
        }
        self.step += 1;
        let n = out.mem_stats.len().max(1) as f64;
        let has_mem = !out.mem_stats.is_empty();
        Ok(StepMetrics {
            step,
            lm_loss,
            aux_loss,
            val_loss: None,
            top1_score_mean: has_mem.then(|| out.mem_stats.iter().map(|s| s.top1_mean).sum::<f64>() / n),
            mem_out_std: has_mem.then(|| out.mem_out_std.iter().sum::<f64>() / n),
            grad_norm: norm,
            lr: lr_base,
            value_lr: lr_values,
        })
    }

    fn diverged(&self, step: usize, lm: f64, aux: f64, norm: f64) -> Error {
        Error::Divergence {
            step,
            detail: format!(
                "lm_loss={lm} aux_loss={aux} grad_norm={norm} lr={:.3e}",
                self.lr(step, ParamGroup::Base)
            ),
        }
    }

    /// One step on a fresh random batch from the corpus.
    pub fn step_corpus(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        let t = &self.model.cfg.train;
        let (x, y) = corpus.train_batch(t.batch, t.seq_len, &mut self.rng);
        self.step_on(&x, &y)
    }

    /// Mean loss over the configured number of fixed validation batches.
    pub fn validate(&self, corpus: &Corpus) -> Result<f64> {
        let t = &self.model.cfg.train;
        let mut total = 0.0;
        for k in 0..t.eval_batches.max(1) {
            let (x, y) = corpus.valid_batch(k, t.batch, t.seq_len);
            total += self.model.eval_loss(&x, &y, t.seq_len, self.precision)?;
        }
        Ok(total / t.eval_batches.max(1) as f64)
    }
}

/// Perplexity over every full validation window.
pub fn perplexity(model: &Model, corpus: &Corpus, precision: Precision) -> Result<f64> {
    let seq_len = model.cfg.train.seq_len;
    let (mut total, mut count) = (0.0, 0usize);
    for (x, y) in corpus.valid_windows(seq_len) {
        total += model.eval_loss(&x, &y, seq_len, precision)? * y.len() as f64;
        count += y.len();
    }
    if count == 0 {
        return Err(Error::config("validation split has no full window"));
    }
    Ok((total / count as f64).exp())
}

/// Runs the configured number of steps, validating every `eval_every` steps
/// and after the last one. Each row is passed to `log` as it is produced.
pub fn train(
    cfg: &LmConfig,
    corpus: &Corpus,
    precision: Precision,
    mut log: impl FnMut(&StepMetrics, &Trainer) -> Result<()>,
) -> Result<(Trainer, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(cfg, precision)?;
    let steps = trainer.model.cfg.train.steps;
    let every = trainer.model.cfg.train.eval_every;
    let mut rows = Vec::with_capacity(steps);
    for s in 0..steps {
        let mut row = trainer.step_corpus(corpus)?;
        if (every > 0 && (s + 1) % every == 0) || s + 1 == steps {
            row.val_loss = Some(trainer.validate(corpus)?);
        }
        log(&row, &trainer)?;
        rows.push(row);
    }
    Ok((trainer, rows))
}

pub fn write_csv(rows: &[StepMetrics], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}
