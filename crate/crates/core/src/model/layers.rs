//! Tape-level building blocks of one transformer layer and of the memory
//! write.

use mneme_tensor::{Tape, Var};

use super::config::ModelConfig;
use super::params::Bound;
use crate::error::Result;

/// Log-spaced bucket of a causal distance (query index minus key index).
/// Distances below `buckets / 2` get their own bucket; larger ones share
/// log-spaced buckets up to `max_distance`, beyond which they saturate.
pub fn rel_bucket(distance: usize, buckets: usize, max_distance: usize) -> usize {
    let exact = buckets / 2;
    if distance < exact {
        return distance;
    }
    let span = (buckets - exact) as f64;
    let ratio = (distance as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln();
    (exact + (ratio * span) as usize).min(buckets - 1)
}

/// Causal self-attention of `n_cur: [T×d]` over `[n_mem; n_cur]`, with a
/// learned per-head relative-position bias and no absolute positions.
pub fn self_attention(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    n_cur: Var,
    n_mem: Option<Var>,
) -> Result<Var> {
    let t = tape.shape(n_cur)[0];
    let m = n_mem.map_or(0, |v| tape.shape(v)[0]);
    let s = m + t;
    let kv = match n_mem {
        Some(mem) => tape.concat(&[mem, n_cur], 0)?,
        None => n_cur,
    };
    let q = tape.matmul(n_cur, b.layer(layer, "attn.wq"))?;
    let k = tape.matmul(kv, b.layer(layer, "attn.wk"))?;
    let v = tape.matmul(kv, b.layer(layer, "attn.wv"))?;
    let rel = b.layer(layer, "attn.rel_bias");

    let mut mask = Vec::with_capacity(t * s);
    let mut buckets = Vec::with_capacity(t * s);
    for i in 0..t {
        for j in 0..s {
            let visible = j <= i + m;
            mask.push(visible);
            buckets.push(if visible { rel_bucket(i + m - j, cfg.rel_buckets, cfg.rel_max_distance) } else { 0 });
        }
    }
    let dk = cfg.self_head_dim();
    let inv = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.self_heads);
    for h in 0..cfg.self_heads {
        let qh = tape.slice(q, 1, h * dk, dk)?;
        let kh = tape.slice(k, 1, h * dk, dk)?;
        let vh = tape.slice(v, 1, h * dk, dk)?;
        let raw = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(raw, inv)?;
        let idx: Vec<usize> = buckets.iter().map(|&bk| h * cfg.rel_buckets + bk).collect();
        let bias = tape.gather(rel, &idx, vec![t, s])?;
        let scores = tape.add(scores, bias)?;
        let p = tape.softmax_masked(scores, 1, Some(&mask))?;
        heads.push(tape.matmul(p, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    Ok(tape.matmul(cat, b.layer(layer, "attn.wo"))?)
}

/// Cross-attention read from entity memory.
#[derive(Debug, Clone)]
pub struct CrossRead {
    /// Entity-aware representation `[T×d]`.
    pub e: Var,
    /// Per head attention over slots, each `[T×Z]`.
    pub weights: Vec<Var>,
}

/// Scores each token against the static `keys` and aggregates the dynamic
/// `values`, head by head, then mixes the heads with `W_E`.
pub fn cross_attend(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    keys: Var,
    values: Var,
) -> Result<CrossRead> {
    let q = tape.matmul(x, b.layer(layer, "cross.wq"))?;
    let kp = tape.matmul(keys, b.layer(layer, "cross.wk"))?;
    let vp = tape.matmul(values, b.layer(layer, "cross.wm"))?;
    let dk = cfg.cross_head_dim();
    let inv = 1.0 / (cfg.memory_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(cfg.cross_heads);
    let mut weights = Vec::with_capacity(cfg.cross_heads);
    for h in 0..cfg.cross_heads {
        let qh = tape.slice(q, 1, h * dk, dk)?;
        let kh = tape.slice(kp, 1, h * dk, dk)?;
        let vh = tape.slice(vp, 1, h * dk, dk)?;
        let raw = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(raw, inv)?;
        let a = tape.softmax(logits, 1)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let e = tape.matmul(cat, b.layer(layer, "cross.we"))?;
    Ok(CrossRead { e, weights })
}

/// How the self-attention and memory streams are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Gate held at exactly zero, the limit of a pre-activation at −∞.
    Closed,
}

/// `h' = (1 − g) ⊙ h + g ⊙ e` with `g = σ([h; e] W_R + b_R)` per dimension.
/// Returns the merged stream and the gate.
pub fn gate_combine(tape: &mut Tape, b: &Bound, layer: usize, h: Var, e: Var, mode: GateMode) -> Result<(Var, Var)> {
    let g = match mode {
        GateMode::Learned => {
            let he = tape.concat(&[h, e], 1)?;
            let pre = tape.matmul(he, b.layer(layer, "gate.w"))?;
            let pre = tape.add_row(pre, b.layer(layer, "gate.b"))?;
            tape.sigmoid(pre)?
        }
        GateMode::Closed => {
            let shape = tape.shape(h).to_vec();
            let n = shape.iter().product();
            tape.constant(shape, vec![0.0; n])?
        }
    };
    Ok((convex(tape, g, h, e)?, g))
}

/// `(1 − c) ⊙ a + c ⊙ b`
fn convex(tape: &mut Tape, c: Var, a: Var, b: Var) -> Result<Var> {
    let keep = tape.one_minus(c)?;
    let ka = tape.mul(keep, a)?;
    let cb = tape.mul(c, b)?;
    Ok(tape.add(ka, cb)?)
}

/// Intermediate quantities of one memory write.
#[derive(Debug, Clone)]
pub struct MemoryWrite {
    pub values: Var,
    /// Per-slot summary of the chunk, `[Z×d]`.
    pub summary: Var,
    /// Largest attention each slot received, `[Z]`.
    pub strength: Var,
    /// Update gate, `[Z×d]`.
    pub gate: Var,
}

/// Gated convex write of the chunk's final hidden states into the slot
/// values, driven by the final layer's cross-attention `weights` (one
/// `[T×Z]` matrix per head). Keys are not touched.
pub fn update_memory(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    values: Var,
    hidden: Var,
    weights: &[Var],
) -> Result<MemoryWrite> {
    let (t, z) = (tape.shape(weights[0])[0], tape.shape(weights[0])[1]);
    let stacked: Vec<Var> = weights
        .iter()
        .map(|&a| tape.reshape(a, vec![1, t, z]))
        .collect::<std::result::Result<_, _>>()?;
    let all = if stacked.len() == 1 { stacked[0] } else { tape.concat(&stacked, 0)? };
    let s = tape.max_over_axis(all, 0)?;
    let s = tape.reshape(s, vec![t, z])?;
    let scaled = tape.scale(s, 1.0 / cfg.tau)?;
    let over_tokens = tape.softmax(scaled, 0)?;
    let ot = tape.transpose(over_tokens)?;
    let summary = tape.matmul(ot, hidden)?;
    let strength = tape.max_over_axis(s, 0)?;
    let sv = tape.concat(&[summary, values], 1)?;
    let pre = tape.matmul(sv, b.get("update.w"))?;
    let pre = tape.add_row(pre, b.get("update.b"))?;
    let gate = tape.sigmoid(pre)?;
    let wg = tape.mul_col(gate, strength)?;
    let values = convex(tape, wg, values, summary)?;
    Ok(MemoryWrite { values, summary, strength, gate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_exact_then_logarithmic() {
        for d in 0..16 {
            assert_eq!(rel_bucket(d, 32, 128), d);
        }
        let mut prev = 0;
        for d in 0..1000 {
            let bk = rel_bucket(d, 32, 128);
            assert!(bk >= prev && bk < 32);
            prev = bk;
        }
        assert_eq!(rel_bucket(5000, 32, 128), 31);
    }
}
