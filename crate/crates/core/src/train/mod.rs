//! Training objective, optimizers and the chunked training loop.

mod optim;
mod targets;

use std::io::Write;
use std::path::Path;

use mneme_tensor::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerKind};
pub use targets::{build_entity_targets, kl_sum, regularization_loss, EntityTargets, KL_FLOOR};

use crate::corpus::{AnnotatedNarrative, EncodedPrompt, EntityPrompt, Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::{Bound, MemoryInit, Model, Stream};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the attention regularizer.
    pub lambda: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    /// Narratives per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Start every story from random slots instead of the prompt.
    pub ablate_memory_init: bool,
    /// Drop the regularizer, as if `lambda` were 0.
    pub ablate_entity_supervision: bool,
    /// Global gradient-norm cap; 0 disables clipping.
    pub gradient_clip_norm: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 1000,
            batch_size: 1,
            seed: 0,
            ablate_memory_init: false,
            ablate_entity_supervision: false,
            gradient_clip_norm: 1.0,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be a finite non-negative number");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return fail("steps and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("need beta1, beta2 in [0, 1) and adam_eps > 0");
        }
        if !(self.gradient_clip_norm >= 0.0) {
            return fail("gradient_clip_norm must be non-negative");
        }
        Ok(())
    }

    /// Regularizer weight actually applied.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablate_entity_supervision {
            0.0
        } else {
            self.lambda
        }
    }

    /// Memory initialization for the story at `index`.
    pub fn memory_init(&self, index: usize) -> MemoryInit {
        memory_init(self.ablate_memory_init, self.seed, index)
    }

    pub fn optimizer(&self, model: &Model) -> Optimizer {
        Optimizer::new(
            self.optimizer,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.gradient_clip_norm,
            self.warmup_steps,
            &model.params,
        )
    }
}

/// Prompt initialization, or seeded random slots for the ablation.
pub fn memory_init(ablate: bool, seed: u64, index: usize) -> MemoryInit {
    if ablate {
        MemoryInit::Random { seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64 }
    } else {
        MemoryInit::Prompt
    }
}

/// A narrative ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub story_id: String,
    pub prompt: EncodedPrompt,
    pub ids: Vec<usize>,
    pub targets: EntityTargets,
}

impl Example {
    pub fn new(narrative: &AnnotatedNarrative, vocab: &Vocab) -> Result<Self> {
        let prompt = EntityPrompt::from_narrative(narrative).encode(vocab);
        let z = prompt.groups.len() + 1;
        Ok(Self {
            story_id: narrative.story_id.clone(),
            ids: vocab.encode(&narrative.tokens),
            targets: build_entity_targets(narrative, z)?,
            prompt,
        })
    }
}

pub fn prepare(corpus: &[AnnotatedNarrative], vocab: &Vocab) -> Result<Vec<Example>> {
    corpus.iter().map(|n| Example::new(n, vocab)).collect()
}

/// Loss of one narrative on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: mneme_tensor::Var,
    pub nll: f64,
    pub kl: f64,
}

/// Teacher-forced loss of one narrative: mean NLL over every narrative
/// token and the end-of-story token, plus `lambda` times the mean KL
/// regularizer over narrative positions, layers and heads.
pub fn narrative_loss(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    ex: &Example,
    lambda: f64,
    init: MemoryInit,
) -> Result<LossParts> {
    let mut stream = Stream::new(model);
    let pp = stream.prompt(tape, b, &ex.prompt, init)?;
    let mut logits = vec![pp.last_logits];
    let mut kl_total = None;
    let cfg = &model.config;
    for start in (0..ex.ids.len()).step_by(cfg.chunk_size) {
        let end = (start + cfg.chunk_size).min(ex.ids.len());
        let out = stream.forward(tape, b, &ex.ids[start..end])?;
        logits.push(out.logits);
        if !out.cross.is_empty() {
            let s = kl_sum(tape, &out.cross, &ex.targets, start)?;
            kl_total = Some(match kl_total {
                None => s,
                Some(k) => tape.add(k, s)?,
            });
        }
        stream.commit(tape, b, &out)?;
    }
    let all = if logits.len() == 1 { logits[0] } else { tape.concat(&logits, 0)? };
    let mut targets = ex.ids.clone();
    targets.push(EOS);
    let nll = tape.cross_entropy(all, &targets)?;
    let nll_value = tape.scalar(nll);
    let Some(kl_total) = kl_total else {
        return Ok(LossParts { total: nll, nll: nll_value, kl: 0.0 });
    };
    let count = ex.ids.len() * cfg.num_layers * cfg.cross_heads;
    let kl = tape.scale(kl_total, 1.0 / count as f64)?;
    let kl_value = tape.scalar(kl);
    let total = if lambda > 0.0 {
        let weighted = tape.scale(kl, lambda)?;
        tape.add(nll, weighted)?
    } else {
        nll
    };
    Ok(LossParts { total, nll: nll_value, kl: kl_value })
}

/// Loss values and parameter gradients for one narrative.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
    pub grads: Vec<Vec<f64>>,
}

pub fn narrative_gradients(model: &Model, ex: &Example, lambda: f64, init: MemoryInit) -> Result<Gradients> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, true);
    let parts = narrative_loss(model, &mut tape, &b, ex, lambda, init)?;
    tape.backward(parts.total)?;
    let grads = b
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok(Gradients { nll: parts.nll, kl: parts.kl, total: tape.scalar(parts.total), grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

/// Trains `model` in place. `on_step` sees every trace row as it is made.
pub fn train_loop(
    model: &mut Model,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TraceRow, &Model),
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let lambda = cfg.effective_lambda();
    let mut opt = cfg.optimizer(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    let workers = par::worker_count();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let m: &Model = model;
        let results = par::map(&batch, workers, |_, &i| narrative_gradients(m, &examples[i], lambda, cfg.memory_init(i)));
        let mut grads: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let (mut nll, mut kl, mut total) = (0.0, 0.0, 0.0);
        let scale = 1.0 / batch.len() as f64;
        for r in results {
            let r = r?;
            nll += r.nll * scale;
            kl += r.kl * scale;
            total += r.total * scale;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x * scale;
                }
            }
        }
        opt.step(&mut model.params, grads);
        if model.params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(mneme_tensor::TensorError::NonFinite { op: "optimizer step" }.into());
        }
        let row = TraceRow { step, nll, kl, total };
        on_step(&row, model);
        trace.push(row);
    }
    Ok(trace)
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    writeln!(w, "step,nll,kl,total").map_err(io)?;
    for r in trace {
        writeln!(w, "{},{},{},{}", r.step, r.nll, r.kl, r.total).map_err(io)?;
    }
    Ok(())
}

pub fn save_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_csv(std::io::BufWriter::new(f), trace)
}

/// Mean teacher-forced NLL per narrative token (end of story excluded),
/// pooled over all stories.
pub fn evaluate_nll(model: &Model, examples: &[Example], ablate_memory_init: bool, seed: u64) -> Result<f64> {
    let scored = par::map(examples, par::worker_count(), |i, ex| {
        model.teacher_force(&ex.prompt, &ex.ids, memory_init(ablate_memory_init, seed, i))
    });
    let (mut sum, mut count) = (0.0, 0usize);
    for (s, ex) in scored.into_iter().zip(examples) {
        let s = s?;
        sum += s.nll[..ex.ids.len()].iter().sum::<f64>();
        count += ex.ids.len();
    }
    if count == 0 {
        return Err(Error::Input("no narrative tokens to evaluate".into()));
    }
    Ok(sum / count as f64)
}
