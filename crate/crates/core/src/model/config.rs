use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Recurrence-cache transformer without entity memory.
    Vanilla,
    /// Entity memory read through cross-attention, never updated.
    Static,
    /// Entity memory whose values are rewritten after every chunk.
    Dynamic,
}

impl Variant {
    pub fn has_memory(self) -> bool {
        self != Variant::Vanilla
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Static => "static",
            Variant::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "static" => Ok(Variant::Static),
            "dynamic" => Ok(Variant::Dynamic),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_layers: usize,
    pub self_heads: usize,
    pub cross_heads: usize,
    pub hidden_dim: usize,
    /// Width of memory slots. Slots are built from hidden states, so this
    /// must equal `hidden_dim`.
    pub memory_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub cache_size: usize,
    pub chunk_size: usize,
    /// Temperature of the token softmax in the memory update.
    pub tau: f64,
    /// Largest slot count, entities plus the non-entity slot.
    pub max_entities: usize,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub layer_norm_eps: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dynamic,
            num_layers: 2,
            self_heads: 4,
            cross_heads: 4,
            hidden_dim: 64,
            memory_dim: 64,
            ffn_dim: 256,
            vocab_size: 0,
            seq_len: 512,
            cache_size: 500,
            chunk_size: 64,
            tau: 0.1,
            max_entities: 16,
            rel_buckets: 32,
            rel_max_distance: 128,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return fail("num_layers, hidden_dim and ffn_dim must be positive");
        }
        if self.vocab_size <= crate::corpus::Vocab::num_specials() {
            return fail("vocab_size must exceed the number of special tokens");
        }
        if self.self_heads == 0 || !self.hidden_dim.is_multiple_of(self.self_heads) {
            return fail("hidden_dim must be divisible by self_heads");
        }
        if self.variant.has_memory() && (self.cross_heads == 0 || !self.hidden_dim.is_multiple_of(self.cross_heads)) {
            return fail("hidden_dim must be divisible by cross_heads");
        }
        if self.memory_dim != self.hidden_dim {
            return fail("memory_dim must equal hidden_dim");
        }
        if self.chunk_size == 0 || self.chunk_size > self.seq_len {
            return fail("need 0 < chunk_size <= seq_len");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive");
        }
        if self.max_entities < 1 {
            return fail("max_entities must be at least 1");
        }
        if self.rel_buckets < 2 || self.rel_max_distance <= self.rel_buckets / 2 {
            return fail("need rel_buckets >= 2 and rel_max_distance > rel_buckets / 2");
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive");
        }
        Ok(())
    }

    pub fn self_head_dim(&self) -> usize {
        self.hidden_dim / self.self_heads
    }

    pub fn cross_head_dim(&self) -> usize {
        self.hidden_dim / self.cross_heads
    }
}
