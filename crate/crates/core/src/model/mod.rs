//! Recurrence-cache transformer LM with optional entity memory.

mod checkpoint;
mod config;
pub mod layers;
mod params;

use std::ops::Range;

use mneme_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use config::{ModelConfig, Variant};
pub use layers::{CrossRead, GateMode, MemoryWrite};
pub use params::{Bound, ParamStore};

use crate::corpus::EncodedPrompt;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub gate_mode: GateMode,
}

/// Layer inputs of the most recent tokens, kept as plain data so no
/// gradient reaches the segments that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceCache {
    capacity: usize,
    dim: usize,
    layers: Vec<Vec<f64>>,
}

impl RecurrenceCache {
    pub fn new(num_layers: usize, dim: usize, capacity: usize) -> Self {
        Self { capacity, dim, layers: vec![Vec::new(); num_layers] }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of cached tokens.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len() / self.dim)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    /// Appends one `[T×d]` block per layer and evicts the oldest rows
    /// beyond capacity.
    pub fn push(&mut self, blocks: &[&[f64]]) {
        let keep = self.capacity * self.dim;
        for (layer, block) in self.layers.iter_mut().zip(blocks) {
            layer.extend_from_slice(block);
            if layer.len() > keep {
                layer.drain(..layer.len() - keep);
            }
        }
    }
}

/// Memory slots on a tape. In the static variant `values == keys`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryVars {
    pub keys: Var,
    pub values: Var,
}

/// Memory slots as plain data: `Z` rows of static keys and dynamic values.
/// The last slot holds non-entity information.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMemoryState {
    pub keys: Tensor,
    pub values: Tensor,
}

impl EntityMemoryState {
    pub fn num_slots(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.keys
            .data()
            .iter()
            .chain(self.values.data())
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

/// Where initial slot contents come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryInit {
    /// Mean final hidden state of each entity's prompt tokens.
    Prompt,
    /// Standard normal slots, for the no-initialization ablation.
    Random { seed: u64 },
}

/// Everything one chunk produces on the tape.
#[derive(Debug, Clone)]
pub struct ChunkOutput {
    /// Next-token logits `[T×V]`.
    pub logits: Var,
    /// Final hidden states after the last layer norm, `[T×d]`.
    pub hidden: Var,
    /// Cross-attention per layer and head, each `[T×Z]`; empty without memory.
    pub cross: Vec<Vec<Var>>,
    /// Merge gates per layer, each `[T×d]`; empty without memory.
    pub gates: Vec<Var>,
    /// Input of every layer, `[T×d]`, which is what the cache stores.
    pub layer_inputs: Vec<Var>,
}

/// Result of feeding the entity prompt.
#[derive(Debug, Clone)]
pub struct PromptPass {
    /// Logits of the last prompt position `[1×V]`, predicting the first
    /// narrative token.
    pub last_logits: Var,
    /// Final hidden states of every prompt position `[P×d]`.
    pub hidden: Var,
}

/// Negative log-likelihood of `target` under softmax of `row`.
pub fn token_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln() - row[target]
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config)?;
        Ok(Self { config, params, gate_mode: GateMode::Learned })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params, gate_mode: GateMode::Learned })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Runs one chunk of `tokens` through every layer, attending over the
    /// cached rows plus the chunk itself. Cross-attention runs only when
    /// `memory` is given. Nothing is committed.
    pub fn forward_chunk(
        &self,
        tape: &mut Tape,
        b: &Bound,
        tokens: &[usize],
        cache: &RecurrenceCache,
        memory: Option<&MemoryVars>,
    ) -> Result<ChunkOutput> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty chunk".into()));
        }
        if tokens.len() > cfg.seq_len {
            return Err(Error::Input(format!("chunk of {} tokens exceeds seq_len {}", tokens.len(), cfg.seq_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if memory.is_some() && !cfg.variant.has_memory() {
            return Err(Error::Contract("vanilla model given an entity memory".into()));
        }
        let eps = cfg.layer_norm_eps;
        let d = cfg.hidden_dim;
        let mut x = tape.gather_rows(b.get("embed"), tokens)?;
        let mut cross = Vec::new();
        let mut gates = Vec::new();
        let mut layer_inputs = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            layer_inputs.push(x);
            let (g1, b1) = (b.layer(l, "ln1.gamma"), b.layer(l, "ln1.beta"));
            let n = tape.layer_norm(x, Some(g1), Some(b1), eps)?;
            let n_mem = if cache.is_empty() {
                None
            } else {
                let rows = cache.layer(l);
                let c = tape.constant(vec![rows.len() / d, d], rows.to_vec())?;
                Some(tape.layer_norm(c, Some(g1), Some(b1), eps)?)
            };
            let mut h = layers::self_attention(tape, b, cfg, l, n, n_mem)?;
            if let Some(mem) = memory {
                let read = layers::cross_attend(tape, b, cfg, l, n, mem.keys, mem.values)?;
                let (merged, g) = layers::gate_combine(tape, b, l, h, read.e, self.gate_mode)?;
                h = merged;
                cross.push(read.weights);
                gates.push(g);
            }
            x = tape.add(x, h)?;
            let n2 = tape.layer_norm(x, Some(b.layer(l, "ln2.gamma")), Some(b.layer(l, "ln2.beta")), eps)?;
            let f = tape.matmul(n2, b.layer(l, "ffn.w1"))?;
            let f = tape.add_row(f, b.layer(l, "ffn.b1"))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, b.layer(l, "ffn.w2"))?;
            let f = tape.add_row(f, b.layer(l, "ffn.b2"))?;
            x = tape.add(x, f)?;
        }
        let hidden = tape.layer_norm(x, Some(b.get("ln_f.gamma")), Some(b.get("ln_f.beta")), eps)?;
        let logits = tape.matmul(hidden, b.get("out.w"))?;
        let logits = tape.add_row(logits, b.get("out.b"))?;
        Ok(ChunkOutput { logits, hidden, cross, gates, layer_inputs })
    }

    /// Builds the initial memory from prompt hidden states `[P×d]`. Slot `j`
    /// averages entity `j`'s positions; the final slot averages the
    /// remaining positions (separators and end of prompt) or, when there are
    /// none, is the learned `null_slot`. Keys and values start equal.
    pub fn init_memory(&self, tape: &mut Tape, b: &Bound, hidden: Var, groups: &[Range<usize>]) -> Result<MemoryVars> {
        let p = tape.shape(hidden)[0];
        let z = self.check_groups(groups, p)?;
        let mut inside = vec![false; p];
        let mut avg = Vec::with_capacity(z * p);
        for g in groups {
            let mut row = vec![0.0; p];
            let w = 1.0 / g.len() as f64;
            for i in g.clone() {
                row[i] = w;
                inside[i] = true;
            }
            avg.extend(row);
        }
        let rest: Vec<usize> = (0..p).filter(|&i| !inside[i]).collect();
        let slots = if rest.is_empty() {
            let null = tape.reshape(b.get("null_slot"), vec![1, self.config.hidden_dim])?;
            if groups.is_empty() {
                null
            } else {
                let a = tape.constant(vec![z - 1, p], avg)?;
                let ent = tape.matmul(a, hidden)?;
                tape.concat(&[ent, null], 0)?
            }
        } else {
            let mut row = vec![0.0; p];
            let w = 1.0 / rest.len() as f64;
            for &i in &rest {
                row[i] = w;
            }
            avg.extend(row);
            let a = tape.constant(vec![z, p], avg)?;
            tape.matmul(a, hidden)?
        };
        Ok(MemoryVars { keys: slots, values: slots })
    }

    /// Standard normal slots, one per entity plus the non-entity slot.
    pub fn random_memory(&self, tape: &mut Tape, num_entities: usize, seed: u64) -> Result<MemoryVars> {
        let z = num_entities + 1;
        if z > self.config.max_entities {
            return Err(Error::Input(format!("{z} slots exceed max_entities {}", self.config.max_entities)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.hidden_dim;
        let data: Vec<f64> = (0..z * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let slots = tape.constant(vec![z, d], data)?;
        Ok(MemoryVars { keys: slots, values: slots })
    }

    fn check_groups(&self, groups: &[Range<usize>], prompt_len: usize) -> Result<usize> {
        let z = groups.len() + 1;
        if z > self.config.max_entities {
            return Err(Error::Input(format!("{z} slots exceed max_entities {}", self.config.max_entities)));
        }
        for (j, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Input(format!("entity group {j} is empty")));
            }
            if g.end > prompt_len {
                return Err(Error::Input(format!("entity group {j} exceeds the prompt")));
            }
        }
        Ok(z)
    }

    /// Applies one memory write for the chunk in `out`.
    pub fn update_memory(&self, tape: &mut Tape, b: &Bound, memory: &MemoryVars, out: &ChunkOutput) -> Result<MemoryWrite> {
        if self.config.variant != Variant::Dynamic {
            return Err(Error::Contract(format!("{} model has no memory updates", self.config.variant.name())));
        }
        let last = out.cross.last().ok_or_else(|| Error::State("chunk ran without memory".into()))?;
        layers::update_memory(tape, b, &self.config, memory.values, out.hidden, last)
    }

    pub fn new_cache(&self) -> RecurrenceCache {
        RecurrenceCache::new(self.config.num_layers, self.config.hidden_dim, self.config.cache_size)
    }

    /// Per-target NLL of a narrative given its prompt: targets are every
    /// narrative token followed by end of story. Runs without gradients,
    /// one fresh tape per chunk.
    pub fn teacher_force(&self, prompt: &EncodedPrompt, narrative: &[usize], init: MemoryInit) -> Result<Scored> {
        let mut tape = Tape::new();
        let mut b = self.params.bind(&mut tape, false);
        let mut stream = Stream::new(self);
        let pp = stream.prompt(&mut tape, &b, prompt, init)?;
        let mut nll = Vec::with_capacity(narrative.len() + 1);
        let first = narrative.first().copied().unwrap_or(crate::corpus::EOS);
        nll.push(token_nll(tape.value(pp.last_logits), first));
        let mut attention = Vec::new();
        let mut memory_trace: Vec<EntityMemoryState> = stream.memory_state(&tape).into_iter().collect();
        let v = self.config.vocab_size;
        for start in (0..narrative.len()).step_by(self.config.chunk_size) {
            let end = (start + self.config.chunk_size).min(narrative.len());
            let out = stream.forward(&mut tape, &b, &narrative[start..end])?;
            let logits = tape.value(out.logits);
            for i in start..end {
                let target = narrative.get(i + 1).copied().unwrap_or(crate::corpus::EOS);
                nll.push(token_nll(&logits[(i - start) * v..(i - start + 1) * v], target));
            }
            if let Some(last) = out.cross.last() {
                let z = tape.shape(last[0])[1];
                for i in 0..end - start {
                    let mut row = vec![0.0; z];
                    for &a in last {
                        for (r, x) in row.iter_mut().zip(&tape.value(a)[i * z..(i + 1) * z]) {
                            *r += x;
                        }
                    }
                    row.iter_mut().for_each(|r| *r /= last.len() as f64);
                    attention.push(row);
                }
            }
            stream.commit(&mut tape, &b, &out)?;
            memory_trace.extend(stream.memory_state(&tape));
            let mut fresh = Tape::new();
            b = self.params.bind(&mut fresh, false);
            stream.rebase(&tape, &mut fresh)?;
            tape = fresh;
        }
        Ok(Scored { nll, final_attention: attention, memory_trace })
    }
}

/// Teacher-forced scores of one narrative.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    /// NLL of the first narrative token (predicted from the prompt), of
    /// every following token, and of end of story, in that order.
    pub nll: Vec<f64>,
    /// Final-layer cross-attention for each narrative input position,
    /// averaged over heads; empty without memory.
    pub final_attention: Vec<Vec<f64>>,
    /// Memory after initialization and after every chunk.
    pub memory_trace: Vec<EntityMemoryState>,
}

/// Cache and memory carried across the chunks of one narrative.
#[derive(Debug, Clone)]
pub struct Stream<'m> {
    model: &'m Model,
    pub cache: RecurrenceCache,
    pub memory: Option<MemoryVars>,
}

impl<'m> Stream<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model, cache: model.new_cache(), memory: None }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Feeds the prompt in `seq_len` pieces, committing each to the cache,
    /// then initializes the memory for memory variants.
    pub fn prompt(&mut self, tape: &mut Tape, b: &Bound, prompt: &EncodedPrompt, init: MemoryInit) -> Result<PromptPass> {
        let cfg = &self.model.config;
        let p = prompt.ids.len();
        if p == 0 {
            return Err(Error::Input("empty prompt".into()));
        }
        if p > cfg.seq_len + cfg.cache_size {
            return Err(Error::Input(format!(
                "prompt of {p} tokens exceeds seq_len + cache_size = {}",
                cfg.seq_len + cfg.cache_size
            )));
        }
        self.model.check_groups(&prompt.groups, p)?;
        let mut hidden = Vec::new();
        let mut last = None;
        for piece in prompt.ids.chunks(cfg.seq_len) {
            let out = self.model.forward_chunk(tape, b, piece, &self.cache, None)?;
            self.push_cache(tape, &out);
            hidden.push(out.hidden);
            last = Some(out.logits);
        }
        let hidden = if hidden.len() == 1 { hidden[0] } else { tape.concat(&hidden, 0)? };
        let logits = last.expect("non-empty prompt");
        let rows = tape.shape(logits)[0];
        let last_logits = tape.slice(logits, 0, rows - 1, 1)?;
        if cfg.variant.has_memory() {
            self.memory = Some(match init {
                MemoryInit::Prompt => self.model.init_memory(tape, b, hidden, &prompt.groups)?,
                MemoryInit::Random { seed } => self.model.random_memory(tape, prompt.groups.len(), seed)?,
            });
        }
        Ok(PromptPass { last_logits, hidden })
    }

    /// Tentative forward of `tokens` against the committed state.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, tokens: &[usize]) -> Result<ChunkOutput> {
        self.model.forward_chunk(tape, b, tokens, &self.cache, self.memory.as_ref())
    }

    /// Makes a chunk permanent: extends the cache and, for the dynamic
    /// variant, writes the chunk into memory.
    pub fn commit(&mut self, tape: &mut Tape, b: &Bound, out: &ChunkOutput) -> Result<Option<MemoryWrite>> {
        self.push_cache(tape, out);
        match (&self.memory, self.model.config.variant) {
            (Some(mem), Variant::Dynamic) => {
                let write = self.model.update_memory(tape, b, mem, out)?;
                self.memory = Some(MemoryVars { keys: mem.keys, values: write.values });
                Ok(Some(write))
            }
            _ => Ok(None),
        }
    }

    fn push_cache(&mut self, tape: &Tape, out: &ChunkOutput) {
        let blocks: Vec<&[f64]> = out.layer_inputs.iter().map(|&v| tape.value(v)).collect();
        self.cache.push(&blocks);
    }

    pub fn memory_state(&self, tape: &Tape) -> Option<EntityMemoryState> {
        self.memory.map(|m| EntityMemoryState { keys: tape.tensor(m.keys), values: tape.tensor(m.values) })
    }

    /// Moves the memory onto `to` as constants, dropping its history.
    pub fn rebase(&mut self, from: &Tape, to: &mut Tape) -> Result<()> {
        if let Some(m) = self.memory {
            let keys = to.constant(from.shape(m.keys).to_vec(), from.value(m.keys).to_vec())?;
            let values = if m.values == m.keys {
                keys
            } else {
                to.constant(from.shape(m.values).to_vec(), from.value(m.values).to_vec())?
            };
            self.memory = Some(MemoryVars { keys, values });
        }
        Ok(())
    }

    /// Installs plain-data memory on `tape`.
    pub fn set_memory(&mut self, tape: &mut Tape, state: &EntityMemoryState) -> Result<()> {
        let keys = tape.constant(state.keys.shape().to_vec(), state.keys.data().to_vec())?;
        let values = tape.constant(state.values.shape().to_vec(), state.values.data().to_vec())?;
        self.memory = Some(MemoryVars { keys, values });
        Ok(())
    }
}
