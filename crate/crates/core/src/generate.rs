//! Prompt-conditioned sampling with nucleus truncation.

use std::io::Write;
use std::path::Path;

use mneme_tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedPrompt, Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::{MemoryInit, Model, Stream};
use crate::par;

/// Slack on the cumulative-mass test, so that `0.5 + 0.3` reaches `0.8`.
pub const NUCLEUS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub nucleus_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    pub samples_per_prompt: usize,
    pub seed: u64,
    /// Argmax decoding, the zero-temperature limit.
    pub greedy: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { nucleus_p: 0.8, temperature: 1.0, max_tokens: 1000, samples_per_prompt: 5, seed: 0, greedy: false }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::Config("nucleus_p must lie in (0, 1]".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.samples_per_prompt == 0 {
            return Err(Error::Config("samples_per_prompt must be positive".into()));
        }
        Ok(())
    }
}

/// Smallest prefix of `probs` sorted descending (ties to the lower id)
/// whose mass reaches `p`, renormalized. Entries are `(id, probability)`;
/// the last entry takes the remainder so the result sums to exactly 1.
pub fn nucleus_from_probs(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= p - NUCLEUS_TOLERANCE {
            break;
        }
    }
    let mut out: Vec<(usize, f64)> = kept.iter().map(|&i| (i, probs[i] / mass)).collect();
    let head: f64 = out[..out.len() - 1].iter().map(|x| x.1).sum();
    out.last_mut().expect("at least one kept").1 = (1.0 - head).max(0.0);
    out
}

/// Softmax of `logits / temperature`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn nucleus_distribution(logits: &[f64], p: f64, temperature: f64) -> Vec<(usize, f64)> {
    nucleus_from_probs(&softmax_with_temperature(logits, temperature), p)
}

/// Inverse-CDF draw from a truncated distribution.
pub fn sample_from<R: Rng + ?Sized>(dist: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, q) in dist {
        acc += q;
        if u < acc {
            return id;
        }
    }
    dist.last().expect("nucleus is never empty").0
}

pub fn nucleus_sample<R: Rng + ?Sized>(logits: &[f64], p: f64, temperature: f64, rng: &mut R) -> usize {
    sample_from(&nucleus_distribution(logits, p, temperature), rng)
}

/// Index of the largest logit, lowest index on ties.
pub fn greedy(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Generator for one `(prompt, sample)` pair: the seed picks the key and
/// the pair picks the ChaCha stream.
pub fn sample_rng(seed: u64, prompt_index: usize, sample_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((prompt_index as u64) << 32) | sample_index as u64);
    rng
}

fn choose(logits: &[f64], cfg: &GenerateConfig, rng: &mut ChaCha8Rng) -> usize {
    if cfg.greedy {
        greedy(logits)
    } else {
        nucleus_sample(logits, cfg.nucleus_p, cfg.temperature, rng)
    }
}

/// Samples one narrative after `prompt`. The end-of-story token stops
/// generation and is not returned. Every token re-runs the open chunk
/// against the committed cache and memory; full chunks are committed,
/// which is the same schedule teacher forcing uses.
pub fn generate_story(model: &Model, prompt: &EncodedPrompt, cfg: &GenerateConfig, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    cfg.validate()?;
    let v = model.config.vocab_size;
    let mut tape = Tape::new();
    let mut b = model.params.bind(&mut tape, false);
    let mut stream = Stream::new(model);
    let pp = stream.prompt(&mut tape, &b, prompt, MemoryInit::Prompt)?;
    let mut tokens = Vec::new();
    let mut next = choose(tape.value(pp.last_logits), cfg, rng);
    let mut open: Vec<usize> = Vec::new();
    let mut base = tape.len();
    while next != EOS && tokens.len() < cfg.max_tokens {
        tokens.push(next);
        open.push(next);
        let out = stream.forward(&mut tape, &b, &open)?;
        let logits = tape.value(out.logits);
        next = choose(&logits[(open.len() - 1) * v..open.len() * v], cfg, rng);
        if open.len() == model.config.chunk_size {
            stream.commit(&mut tape, &b, &out)?;
            let mut fresh = Tape::new();
            b = model.params.bind(&mut fresh, false);
            stream.rebase(&tape, &mut fresh)?;
            tape = fresh;
            base = tape.len();
            open.clear();
        } else {
            tape.truncate(base);
        }
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub prompt_id: String,
    pub sample_index: usize,
    pub token_ids: Vec<usize>,
    pub text: String,
}

/// All samples for all prompts, in prompt-major order. Each pair has its
/// own generator, so results do not depend on the worker count.
pub fn generate_all(
    model: &Model,
    vocab: &Vocab,
    prompts: &[(String, EncodedPrompt)],
    cfg: &GenerateConfig,
) -> Result<Vec<GeneratedSample>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..prompts.len()).flat_map(|p| (0..cfg.samples_per_prompt).map(move |s| (p, s))).collect();
    par::map(&jobs, par::worker_count(), |_, &(p, s)| {
        let mut rng = sample_rng(cfg.seed, p, s);
        let ids = generate_story(model, &prompts[p].1, cfg, &mut rng)?;
        Ok(GeneratedSample { prompt_id: prompts[p].0.clone(), sample_index: s, text: vocab.detokenize(&ids), token_ids: ids })
    })
    .into_iter()
    .collect()
}

pub fn write_samples<W: Write>(mut w: W, samples: &[GeneratedSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

pub fn save_samples(path: &Path, samples: &[GeneratedSample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_samples(&mut w, samples)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_nucleus() {
        let d = nucleus_from_probs(&[0.5, 0.3, 0.15, 0.05], 0.8);
        assert_eq!(d, vec![(0, 0.625), (1, 0.375)]);
    }

    #[test]
    fn dominant_token_is_a_singleton() {
        let d = nucleus_distribution(&[0.0, 9.0, 1.0], 0.8, 1.0);
        assert_eq!(d, vec![(1, 1.0)]);
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let d = nucleus_from_probs(&[0.25, 0.25, 0.25, 0.25], 0.5);
        assert_eq!(d.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(greedy(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn nucleus_is_minimal_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = rng.gen_range(0.05..1.0);
            let probs = softmax_with_temperature(&logits, 1.0);
            let d = nucleus_from_probs(&probs, p);
            assert!((d.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
            let without_last: f64 = d[..d.len() - 1].iter().map(|x| probs[x.0]).sum();
            assert!(without_last < p - NUCLEUS_TOLERANCE);
        }
    }

    #[test]
    fn full_nucleus_matches_softmax_frequencies() {
        let logits = [0.3, -1.0, 1.2, 0.0];
        let probs = softmax_with_temperature(&logits, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[nucleus_sample(&logits, 1.0, 1.0, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd, "{c} vs {p}");
        }
    }

    #[test]
    fn temperature_sharpens() {
        let cold = softmax_with_temperature(&[1.0, 0.0], 0.5);
        let warm = softmax_with_temperature(&[1.0, 0.0], 2.0);
        assert!(cold[0] > warm[0]);
    }
}
