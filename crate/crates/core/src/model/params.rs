use std::collections::HashMap;

use mneme_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Named model parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

enum Init {
    Zeros,
    Ones,
    /// N(0, 1/fan_in) for a `[fan_in × fan_out]` matrix.
    Fan,
    Normal(f64),
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden_dim;
    let mut out = vec![("embed".to_owned(), vec![cfg.vocab_size, d], Init::Normal(1.0))];
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        add(p("ln1.gamma"), vec![d], Init::Ones);
        add(p("ln1.beta"), vec![d], Init::Zeros);
        for w in ["wq", "wk", "wv", "wo"] {
            add(p(&format!("attn.{w}")), vec![d, d], Init::Fan);
        }
        add(p("attn.rel_bias"), vec![cfg.self_heads, cfg.rel_buckets], Init::Zeros);
        if cfg.variant.has_memory() {
            for w in ["wq", "wk", "wm", "we"] {
                add(p(&format!("cross.{w}")), vec![d, d], Init::Fan);
            }
            add(p("gate.w"), vec![2 * d, d], Init::Fan);
            add(p("gate.b"), vec![d], Init::Zeros);
        }
        add(p("ln2.gamma"), vec![d], Init::Ones);
        add(p("ln2.beta"), vec![d], Init::Zeros);
        add(p("ffn.w1"), vec![d, cfg.ffn_dim], Init::Fan);
        add(p("ffn.b1"), vec![cfg.ffn_dim], Init::Zeros);
        add(p("ffn.w2"), vec![cfg.ffn_dim, d], Init::Fan);
        add(p("ffn.b2"), vec![d], Init::Zeros);
    }
    add("ln_f.gamma".into(), vec![d], Init::Ones);
    add("ln_f.beta".into(), vec![d], Init::Zeros);
    add("out.w".into(), vec![d, cfg.vocab_size], Init::Fan);
    add("out.b".into(), vec![cfg.vocab_size], Init::Zeros);
    if cfg.variant.has_memory() {
        add("null_slot".into(), vec![d], Init::Normal(1.0));
    }
    if cfg.variant == super::Variant::Dynamic {
        add("update.w".into(), vec![2 * d, d], Init::Fan);
        add("update.b".into(), vec![d], Init::Zeros);
    }
    out
}

impl ParamStore {
    /// Fresh parameters for `cfg`, deterministic in `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let std = match init {
                Init::Zeros => 0.0,
                Init::Ones => 0.0,
                Init::Fan => 1.0 / (shape[0] as f64).sqrt(),
                Init::Normal(s) => s,
            };
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                _ => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::param(shape, data)?);
        }
        Ok(Self::from_parts(names, tensors))
    }

    fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Self { names, tensors, index }
    }

    /// Rebuilds a store from named tensors, checking them against the
    /// layout implied by `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = layout(cfg);
        if expected.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} weight records, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((en, es, _), (name, mut t)) in expected.into_iter().zip(named) {
            if en != name || es != t.shape() {
                return Err(Error::Format(format!(
                    "weight record {name} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
            t.requires_grad = true;
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::from_parts(names, tensors))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Overwrites every parameter that `other` also has (same name and
    /// shape). Returns how many were copied.
    pub fn copy_shared_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if let Some(src) = other.get(name) {
                if src.shape() == t.shape() {
                    t.data_mut().copy_from_slice(src.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape`, as gradient-tracked leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = trainable;
                tape.leaf(&t)
            })
            .collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Wraps vars already on a tape, one per parameter in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.tensors.len(), "one var per parameter");
        Bound { vars, index: self.index.clone() }
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn layer(&self, l: usize, name: &str) -> Var {
        self.get(&format!("layers.{l}.{name}"))
    }

    /// Vars in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
