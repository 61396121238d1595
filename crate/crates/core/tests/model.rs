use mneme_core::corpus::{EncodedPrompt, EOP, SEP};
use mneme_core::model::layers::{cross_attend, gate_combine, update_memory, GateMode};
use mneme_core::model::{EntityMemoryState, MemoryInit, Model, ModelConfig, Stream, Variant};
use mneme_tensor::{kernels::sigmoid, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 20;

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        num_layers: 2,
        self_heads: 2,
        cross_heads: 2,
        hidden_dim: 8,
        memory_dim: 8,
        ffn_dim: 16,
        vocab_size: VOCAB,
        seq_len: 16,
        cache_size: 6,
        chunk_size: 4,
        rel_buckets: 8,
        rel_max_distance: 32,
        seed: 11,
        ..Default::default()
    }
}

fn model(variant: Variant) -> Model {
    Model::new(config(variant)).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn prompt_two_entities() -> EncodedPrompt {
    // [e0a e0b SEP e1 SEP e2 EOP]
    EncodedPrompt { ids: vec![7, 8, SEP, 9, SEP, 10, EOP], groups: vec![0..2, 3..4, 5..6] }
}

fn narrative(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(6..VOCAB)).collect()
}

/// Runs prompt and narrative on one tape and returns all logit rows.
fn all_logits(m: &Model, prompt: &EncodedPrompt, ids: &[usize]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let mut s = Stream::new(m);
    let pp = s.prompt(&mut tape, &b, prompt, MemoryInit::Prompt).unwrap();
    let mut rows = vec![tape.value(pp.last_logits).to_vec()];
    for chunk in ids.chunks(m.config.chunk_size) {
        let out = s.forward(&mut tape, &b, chunk).unwrap();
        rows.extend(tape.value(out.logits).chunks(VOCAB).map(<[f64]>::to_vec));
        s.commit(&mut tape, &b, &out).unwrap();
    }
    rows
}

#[test]
fn single_token_entity_slot_is_that_hidden_state() {
    let m = model(Variant::Dynamic);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let cache = m.new_cache();
    let ids = [7, 8, SEP, 9, EOP];
    let out = m.forward_chunk(&mut tape, &b, &ids, &cache, None).unwrap();
    let mem = m.init_memory(&mut tape, &b, out.hidden, &[0..2, 3..4]).unwrap();
    let h = tape.value(out.hidden).to_vec();
    let slots = tape.value(mem.keys).to_vec();
    let row = |i: usize| &h[i * 8..(i + 1) * 8];
    assert_eq!(&slots[8..16], row(3));
    for k in 0..8 {
        assert_eq!(slots[k], (row(0)[k] + row(1)[k]) / 2.0);
        // Non-entity slot: mean of SEP and EOP positions.
        assert_eq!(slots[16 + k], (row(2)[k] + row(4)[k]) / 2.0);
    }
    assert_eq!(mem.keys, mem.values);
}

#[test]
fn memory_init_matches_gather_mean_oracle() {
    let m = model(Variant::Dynamic);
    let prompt = prompt_two_entities();
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let mut s = Stream::new(&m);
    let pp = s.prompt(&mut tape, &b, &prompt, MemoryInit::Prompt).unwrap();
    let state = s.memory_state(&tape).unwrap();
    assert_eq!(state.num_slots(), 4);

    // Oracle: a separate cache-free forward over the prompt, then plain loops.
    let mut t2 = Tape::new();
    let b2 = m.params.bind(&mut t2, false);
    let out = m.forward_chunk(&mut t2, &b2, &prompt.ids, &m.new_cache(), None).unwrap();
    let h = t2.value(out.hidden);
    assert_eq!(h, tape.value(pp.hidden));
    let mean_of = |pos: &[usize]| -> Vec<f64> {
        (0..8).map(|k| pos.iter().map(|&i| h[i * 8 + k]).sum::<f64>() / pos.len() as f64).collect()
    };
    let expected = [mean_of(&[0, 1]), mean_of(&[3]), mean_of(&[5]), mean_of(&[2, 4, 6])];
    for (j, e) in expected.iter().enumerate() {
        for k in 0..8 {
            assert!((state.keys.at(&[j, k]) - e[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn prompt_with_only_entities_uses_learned_null_slot() {
    let m = model(Variant::Static);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let out = m.forward_chunk(&mut tape, &b, &[7, 8], &m.new_cache(), None).unwrap();
    let mem = m.init_memory(&mut tape, &b, out.hidden, &[0..2]).unwrap();
    assert_eq!(&tape.value(mem.keys)[8..], m.params.get("null_slot").unwrap().data());
}

#[test]
fn init_memory_rejects_bad_groups() {
    let m = model(Variant::Dynamic);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let out = m.forward_chunk(&mut tape, &b, &[7, 8, EOP], &m.new_cache(), None).unwrap();
    assert!(m.init_memory(&mut tape, &b, out.hidden, &[0..0]).is_err());
    let too_many: Vec<_> = (0..16).map(|_| 0..1).collect();
    assert!(m.init_memory(&mut tape, &b, out.hidden, &too_many).is_err());
    let long = EncodedPrompt { ids: vec![7; 23], groups: vec![] };
    let mut s = Stream::new(&m);
    assert!(s.prompt(&mut tape, &b, &long, MemoryInit::Prompt).is_err());
}

fn naive_cross(m: &Model, x: &[f64], t: usize, keys: &[f64], values: &[f64], z: usize) -> (Vec<f64>, Vec<f64>) {
    let d = 8;
    let h = 2;
    let dk = d / h;
    let p = |n: &str| m.params.get(&format!("layers.0.cross.{n}")).unwrap().data().to_vec();
    let (wq, wk, wm, we) = (p("wq"), p("wk"), p("wm"), p("we"));
    let proj = |row: &[f64], w: &[f64], col: usize| (0..d).map(|r| row[r] * w[r * d + col]).sum::<f64>();
    let mut e = vec![0.0; t * d];
    let mut a_all = vec![0.0; h * t * z];
    for i in 0..t {
        let xi = &x[i * d..(i + 1) * d];
        let mut cat = vec![0.0; d];
        for head in 0..h {
            let mut logits = vec![0.0; z];
            for (j, lg) in logits.iter_mut().enumerate() {
                let kj = &keys[j * d..(j + 1) * d];
                let mut dot = 0.0;
                for c in head * dk..(head + 1) * dk {
                    dot += proj(xi, &wq, c) * proj(kj, &wk, c);
                }
                *lg = dot / (d as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let sum: f64 = ex.iter().sum();
            for j in 0..z {
                let a = ex[j] / sum;
                a_all[(head * t + i) * z + j] = a;
                let vj = &values[j * d..(j + 1) * d];
                for c in head * dk..(head + 1) * dk {
                    cat[c] += a * proj(vj, &wm, c);
                }
            }
        }
        for c in 0..d {
            e[i * d + c] = proj(&cat, &we, c);
        }
    }
    (e, a_all)
}

#[test]
fn cross_attention_matches_naive_loops() {
    let m = model(Variant::Dynamic);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, z) = (3, 4);
    let x = random_matrix(&mut rng, t, 8);
    let keys = random_matrix(&mut rng, z, 8);
    let values = random_matrix(&mut rng, z, 8);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let xv = tape.constant(vec![t, 8], x.clone()).unwrap();
    let kv = tape.constant(vec![z, 8], keys.clone()).unwrap();
    let vv = tape.constant(vec![z, 8], values.clone()).unwrap();
    let read = cross_attend(&mut tape, &b, &m.config, 0, xv, kv, vv).unwrap();
    let (e, a) = naive_cross(&m, &x, t, &keys, &values, z);
    for (p, q) in tape.value(read.e).iter().zip(&e) {
        assert!((p - q).abs() < 1e-10);
    }
    for head in 0..2 {
        for (p, q) in tape.value(read.weights[head]).iter().zip(&a[head * t * z..(head + 1) * t * z]) {
            assert!((p - q).abs() < 1e-10);
        }
    }
}

#[test]
fn single_slot_attention_is_one_and_ignores_input() {
    let m = model(Variant::Dynamic);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let xv = tape.constant(vec![3, 8], random_matrix(&mut rng, 3, 8)).unwrap();
    let slot = tape.constant(vec![1, 8], random_matrix(&mut rng, 1, 8)).unwrap();
    let read = cross_attend(&mut tape, &b, &m.config, 0, xv, slot, slot).unwrap();
    for &a in &read.weights {
        assert!(tape.value(a).iter().all(|&v| v == 1.0));
    }
    let e = tape.value(read.e);
    for i in 1..3 {
        assert_eq!(&e[..8], &e[i * 8..(i + 1) * 8]);
    }
}

#[test]
fn identical_keys_give_uniform_attention() {
    let m = model(Variant::Dynamic);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let row = random_matrix(&mut rng, 1, 8);
    let keys: Vec<f64> = row.iter().cycle().take(5 * 8).cloned().collect();
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let xv = tape.constant(vec![2, 8], random_matrix(&mut rng, 2, 8)).unwrap();
    let kv = tape.constant(vec![5, 8], keys).unwrap();
    let vv = tape.constant(vec![5, 8], random_matrix(&mut rng, 5, 8)).unwrap();
    let read = cross_attend(&mut tape, &b, &m.config, 1, xv, kv, vv).unwrap();
    for &a in &read.weights {
        assert!(tape.value(a).iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
}

#[test]
fn gate_limits_and_fixed_point() {
    let mut m = model(Variant::Dynamic);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let hd = random_matrix(&mut rng, 3, 8);
    let ed = random_matrix(&mut rng, 3, 8);

    let run = |m: &Model, mode: GateMode, e: &[f64]| {
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape, false);
        let h = tape.constant(vec![3, 8], hd.clone()).unwrap();
        let e = tape.constant(vec![3, 8], e.to_vec()).unwrap();
        let (out, g) = gate_combine(&mut tape, &b, 0, h, e, mode).unwrap();
        (tape.value(out).to_vec(), tape.value(g).to_vec())
    };
    // Closed gate passes h through exactly.
    let (out, g) = run(&m, GateMode::Closed, &ed);
    assert!(g.iter().all(|&v| v == 0.0));
    assert_eq!(out, hd);
    // Learned gate is strictly inside (0, 1).
    let (_, g) = run(&m, GateMode::Learned, &ed);
    assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
    // h = e is a fixed point.
    let (out, _) = run(&m, GateMode::Learned, &hd);
    for (o, h) in out.iter().zip(&hd) {
        assert!((o - h).abs() < 1e-15);
    }
    // Huge positive bias: output tends to e.
    m.params.get_mut("layers.0.gate.w").unwrap().data_mut().fill(0.0);
    m.params.get_mut("layers.0.gate.b").unwrap().data_mut().fill(40.0);
    let (out, _) = run(&m, GateMode::Learned, &ed);
    for (o, e) in out.iter().zip(&ed) {
        assert!((o - e).abs() < 1e-15);
    }
    // Huge negative bias: output equals h.
    m.params.get_mut("layers.0.gate.b").unwrap().data_mut().fill(-800.0);
    let (out, _) = run(&m, GateMode::Learned, &ed);
    assert_eq!(out, hd);
}

fn normalized_rows(rng: &mut ChaCha8Rng, t: usize, z: usize, zero_col: Option<usize>) -> Vec<f64> {
    let mut out = Vec::new();
    for _ in 0..t {
        let mut row: Vec<f64> = (0..z).map(|j| if Some(j) == zero_col { 0.0 } else { rng.gen_range(0.01..1.0) }).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
        out.extend(row);
    }
    out
}

#[test]
fn memory_update_matches_scalar_reference_and_is_convex() {
    let m = model(Variant::Dynamic);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, z, d, h) = (4, 3, 8, 2);
    let hidden = random_matrix(&mut rng, t, d);
    let values = random_matrix(&mut rng, z, d);
    let a: Vec<Vec<f64>> = (0..h).map(|_| normalized_rows(&mut rng, t, z, None)).collect();

    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let hv = tape.constant(vec![t, d], hidden.clone()).unwrap();
    let vv = tape.constant(vec![z, d], values.clone()).unwrap();
    let av: Vec<_> = a.iter().map(|x| tape.constant(vec![t, z], x.clone()).unwrap()).collect();
    let w = update_memory(&mut tape, &b, &m.config, vv, hv, &av).unwrap();
    let got = tape.value(w.values);

    let wu = m.params.get("update.w").unwrap().data();
    let bu = m.params.get("update.b").unwrap().data();
    let tau = m.config.tau;
    for j in 0..z {
        let s: Vec<f64> = (0..t).map(|i| (0..h).map(|k| a[k][i * z + j]).fold(f64::MIN, f64::max)).collect();
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        let ex: Vec<f64> = s.iter().map(|x| ((x - mx) / tau).exp()).collect();
        let sum: f64 = ex.iter().sum();
        let hj: Vec<f64> = (0..d).map(|c| (0..t).map(|i| ex[i] / sum * hidden[i * d + c]).sum()).collect();
        let wj = mx;
        let vj = &values[j * d..(j + 1) * d];
        for c in 0..d {
            let mut pre = bu[c];
            for r in 0..d {
                pre += hj[r] * wu[r * d + c] + vj[r] * wu[(d + r) * d + c];
            }
            let g = sigmoid(pre);
            let expect = (1.0 - wj * g) * vj[c] + wj * g * hj[c];
            let v = got[j * d + c];
            assert!((v - expect).abs() < 1e-10, "slot {j} dim {c}");
            let (lo, hi) = (vj[c].min(hj[c]), vj[c].max(hj[c]));
            assert!(v >= lo && v <= hi, "convexity at slot {j} dim {c}");
        }
    }
}

#[test]
fn unattended_slot_is_not_written() {
    let m = model(Variant::Dynamic);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (t, z, d) = (4, 3, 8);
    let values = random_matrix(&mut rng, z, d);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let hv = tape.constant(vec![t, d], random_matrix(&mut rng, t, d)).unwrap();
    let vv = tape.constant(vec![z, d], values.clone()).unwrap();
    let av: Vec<_> = (0..2)
        .map(|_| tape.constant(vec![t, z], normalized_rows(&mut rng, t, z, Some(1))).unwrap())
        .collect();
    let w = update_memory(&mut tape, &b, &m.config, vv, hv, &av).unwrap();
    assert_eq!(tape.value(w.strength)[1], 0.0);
    assert_eq!(&tape.value(w.values)[d..2 * d], &values[d..2 * d]);
}

#[test]
fn full_write_limit_copies_summary() {
    let mut m = model(Variant::Dynamic);
    m.params.get_mut("update.w").unwrap().data_mut().fill(0.0);
    m.params.get_mut("update.b").unwrap().data_mut().fill(40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (t, z, d) = (3, 2, 8);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let hv = tape.constant(vec![t, d], random_matrix(&mut rng, t, d)).unwrap();
    let vv = tape.constant(vec![z, d], random_matrix(&mut rng, z, d)).unwrap();
    // Slot 0 receives all attention from token 0, so its strength is 1.
    let rows = vec![1.0, 0.0, 0.5, 0.5, 0.5, 0.5];
    let av = vec![tape.constant(vec![t, z], rows).unwrap(); 2];
    let w = update_memory(&mut tape, &b, &m.config, vv, hv, &av).unwrap();
    let new = tape.value(w.values)[..d].to_vec();
    let summary = tape.value(w.summary)[..d].to_vec();
    for (a, b) in new.iter().zip(&summary) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn update_is_a_contract_error_without_dynamic_memory() {
    let m = model(Variant::Static);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let mut s = Stream::new(&m);
    s.prompt(&mut tape, &b, &prompt_two_entities(), MemoryInit::Prompt).unwrap();
    let out = s.forward(&mut tape, &b, &[7, 8]).unwrap();
    let mem = s.memory.unwrap();
    assert!(matches!(
        m.update_memory(&mut tape, &b, &mem, &out),
        Err(mneme_core::Error::Contract(_))
    ));
}

#[test]
fn closed_gates_reduce_to_vanilla() {
    let mut dynamic = model(Variant::Dynamic);
    dynamic.gate_mode = GateMode::Closed;
    let mut vanilla = model(Variant::Vanilla);
    let copied = vanilla.params.copy_shared_from(&dynamic.params);
    assert_eq!(copied, vanilla.params.len());
    let prompt = prompt_two_entities();
    let ids = narrative(19, 1);
    let a = all_logits(&dynamic, &prompt, &ids);
    let b = all_logits(&vanilla, &prompt, &ids);
    assert_eq!(a, b);
}

#[test]
fn zero_cache_equals_cache_free_forward() {
    let mut cfg = config(Variant::Vanilla);
    cfg.cache_size = 0;
    let m = Model::new(cfg).unwrap();
    let prompt = EncodedPrompt { ids: vec![EOP], groups: vec![] };
    let ids = narrative(12, 2);
    let rows = all_logits(&m, &prompt, &ids);
    for (c, chunk) in ids.chunks(4).enumerate() {
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape, false);
        let out = m.forward_chunk(&mut tape, &b, chunk, &m.new_cache(), None).unwrap();
        let alone: Vec<Vec<f64>> = tape.value(out.logits).chunks(VOCAB).map(<[f64]>::to_vec).collect();
        assert_eq!(&rows[1 + c * 4..1 + c * 4 + chunk.len()], &alone[..]);
    }
}

#[test]
fn causality_later_tokens_do_not_change_earlier_logits() {
    for variant in [Variant::Vanilla, Variant::Static, Variant::Dynamic] {
        let m = model(variant);
        let prompt = prompt_two_entities();
        let ids = narrative(14, 3);
        let base = all_logits(&m, &prompt, &ids);
        for p in [0, 5, 13] {
            let mut changed = ids.clone();
            changed[p] = if ids[p] == 6 { 7 } else { 6 };
            let other = all_logits(&m, &prompt, &changed);
            // Row r predicts narrative token r from inputs up to r - 1.
            assert_eq!(&base[..=p], &other[..=p], "{variant:?} p={p}");
            assert_ne!(base[p + 1], other[p + 1]);
        }
    }
}

/// Logits of the last position of `ids`, fed in chunks from a cold cache.
fn last_row(m: &Model, ids: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let mut s = Stream::new(m);
    let mut last = Vec::new();
    for chunk in ids.chunks(m.config.chunk_size) {
        let out = s.forward(&mut tape, &b, chunk).unwrap();
        let v = tape.value(out.logits);
        last = v[v.len() - VOCAB..].to_vec();
        s.commit(&mut tape, &b, &out).unwrap();
    }
    last
}

#[test]
fn history_beyond_the_receptive_field_is_irrelevant() {
    // With L layers, a token sees the current chunk plus `cache_size`
    // cached rows per layer, so the receptive field reaches back
    // L * cache_size tokens before the chunk. Truncating at a chunk
    // boundary before that point leaves the logits unchanged.
    for layers in [1, 2] {
        let mut cfg = config(Variant::Vanilla);
        cfg.num_layers = layers;
        cfg.cache_size = 4;
        let m = Model::new(cfg).unwrap();
        let ids = narrative(40, 4);
        let full = last_row(&m, &ids);
        // Last chunk starts at 36; its field starts at 36 - 4 * layers.
        let cut = 36 - 4 * layers;
        let truncated = last_row(&m, &ids[cut..]);
        for (a, b) in full.iter().zip(&truncated) {
            assert!((a - b).abs() < 1e-10);
        }
        // One more token of history is not free.
        let too_short = last_row(&m, &ids[cut + 4..]);
        assert!(full.iter().zip(&too_short).any(|(a, b)| (a - b).abs() > 1e-10));
    }
}

fn trace(m: &Model) -> Vec<EntityMemoryState> {
    m.teacher_force(&prompt_two_entities(), &narrative(18, 5), MemoryInit::Prompt)
        .unwrap()
        .memory_trace
}

#[test]
fn static_memory_is_untouched() {
    let t = trace(&model(Variant::Static));
    assert_eq!(t.len(), 1 + 5);
    for s in &t[1..] {
        assert_eq!(s.to_bytes(), t[0].to_bytes());
    }
}

#[test]
fn dynamic_memory_keeps_keys_and_moves_values() {
    let t = trace(&model(Variant::Dynamic));
    for s in &t[1..] {
        let same = s.keys.data().iter().zip(t[0].keys.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }
    assert_ne!(t.last().unwrap().values, t[0].values);
}

#[test]
fn attention_rows_are_distributions() {
    let m = model(Variant::Dynamic);
    let scored = m.teacher_force(&prompt_two_entities(), &narrative(11, 6), MemoryInit::Prompt).unwrap();
    assert_eq!(scored.nll.len(), 12);
    assert_eq!(scored.final_attention.len(), 11);
    for row in &scored.final_attention {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn teacher_forcing_matches_single_tape_logits() {
    let m = model(Variant::Dynamic);
    let prompt = prompt_two_entities();
    let ids = narrative(10, 7);
    let rows = all_logits(&m, &prompt, &ids);
    let scored = m.teacher_force(&prompt, &ids, MemoryInit::Prompt).unwrap();
    let mut targets = ids.clone();
    targets.push(mneme_core::corpus::EOS);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(scored.nll[i], mneme_core::model::token_nll(row, targets[i]));
    }
}

#[test]
fn random_memory_is_seeded() {
    let m = model(Variant::Dynamic);
    let mut t1 = Tape::new();
    let a = m.random_memory(&mut t1, 3, 4).unwrap();
    let b = m.random_memory(&mut t1, 3, 4).unwrap();
    let c = m.random_memory(&mut t1, 3, 5).unwrap();
    assert_eq!(t1.value(a.keys), t1.value(b.keys));
    assert_ne!(t1.value(a.keys), t1.value(c.keys));
    assert_eq!(t1.shape(a.keys), &[4, 8]);
}
