use mneme_tensor::{Tape, Var};

use crate::corpus::AnnotatedNarrative;
use crate::error::{Error, Result};

/// Floor applied to attention weights inside the log.
pub const KL_FLOOR: f64 = 1e-12;

/// Sparse per-token target distributions over `z` memory slots.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityTargets {
    pub z: usize,
    /// For each token, `(slot, probability)` pairs with equal shares.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl EntityTargets {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dense(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = vec![0.0; range.len() * self.z];
        for (r, i) in range.enumerate() {
            for &(slot, p) in &self.rows[i] {
                out[r * self.z + slot] = p;
            }
        }
        out
    }

    /// `Σ q ln q` over the given tokens.
    pub fn neg_entropy(&self, range: std::ops::Range<usize>) -> f64 {
        self.rows[range]
            .iter()
            .flat_map(|r| r.iter())
            .map(|&(_, p)| p * p.ln())
            .sum()
    }
}

/// Every token is labelled with the entities mentioned in its sentence,
/// uniformly; tokens of mention-free sentences target the last
/// (non-entity) slot.
pub fn build_entity_targets(narrative: &AnnotatedNarrative, z: usize) -> Result<EntityTargets> {
    if z == 0 {
        return Err(Error::Input("need at least the non-entity slot".into()));
    }
    if let Some(m) = narrative.mentions.iter().find(|m| m.entity + 1 >= z) {
        return Err(Error::Input(format!(
            "story {}: mention of entity {} needs more than {z} slots",
            narrative.story_id, m.entity
        )));
    }
    let mut per_sentence: Vec<Vec<usize>> = vec![Vec::new(); narrative.num_sentences()];
    for m in &narrative.mentions {
        let s = &mut per_sentence[narrative.sentence_of(m.start)];
        if !s.contains(&m.entity) {
            s.push(m.entity);
        }
    }
    let mut rows = Vec::with_capacity(narrative.len());
    for (j, span) in narrative.sentences().enumerate() {
        let mut ents = per_sentence[j].clone();
        ents.sort_unstable();
        let row: Vec<(usize, f64)> = if ents.is_empty() {
            vec![(z - 1, 1.0)]
        } else {
            let p = 1.0 / ents.len() as f64;
            ents.into_iter().map(|e| (e, p)).collect()
        };
        rows.extend(std::iter::repeat_n(row, span.len()));
    }
    Ok(EntityTargets { z, rows })
}

/// Sum over tokens, layers and heads of `KL(q_i ‖ a_itl)` for one span of
/// tokens starting at `offset`. `weights[l][h]` is `[T×Z]`.
pub fn kl_sum(tape: &mut Tape, weights: &[Vec<Var>], targets: &EntityTargets, offset: usize) -> Result<Var> {
    let t = tape.shape(weights[0][0])[0];
    let range = offset..offset + t;
    let q = tape.constant(vec![t, targets.z], targets.dense(range.clone()))?;
    let mut cross = None;
    let mut terms = 0usize;
    for layer in weights {
        for &a in layer {
            let la = tape.log_floor(a, KL_FLOOR)?;
            let qa = tape.mul(q, la)?;
            let s = tape.sum(qa)?;
            cross = Some(match cross {
                None => s,
                Some(c) => tape.add(c, s)?,
            });
            terms += 1;
        }
    }
    let cross = cross.ok_or_else(|| Error::Input("no attention weights".into()))?;
    let constant = targets.neg_entropy(range) * terms as f64;
    Ok(tape.affine(cross, -1.0, constant)?)
}

/// Mean over tokens, layers and heads of `KL(q_i ‖ a_itl)`.
pub fn regularization_loss(tape: &mut Tape, weights: &[Vec<Var>], targets: &EntityTargets) -> Result<Var> {
    let t = tape.shape(weights[0][0])[0];
    let count = t * weights.len() * weights[0].len();
    let s = kl_sum(tape, weights, targets, 0)?;
    Ok(tape.scale(s, 1.0 / count as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;

    fn story() -> AnnotatedNarrative {
        // s0: entity 1 | s1: entities 0 and 2 | s2: none
        let tokens: Vec<String> = "b x . a y c . z z .".split(' ').map(str::to_owned).collect();
        AnnotatedNarrative {
            story_id: "t".into(),
            pos_tags: vec!["OTHER".into(); tokens.len()],
            tokens,
            sentence_bounds: vec![0, 3, 7],
            mentions: vec![
                Mention { entity: 1, start: 0, end: 1 },
                Mention { entity: 0, start: 3, end: 4 },
                Mention { entity: 2, start: 5, end: 6 },
                Mention { entity: 0, start: 4, end: 5 },
            ],
        }
    }

    #[test]
    fn shares_are_uniform_over_sentence_entities() {
        let t = build_entity_targets(&story(), 4).unwrap();
        assert_eq!(t.rows[1], vec![(1, 1.0)]);
        assert_eq!(t.rows[6], vec![(0, 0.5), (2, 0.5)]);
        assert_eq!(t.rows[9], vec![(3, 1.0)]);
        for r in &t.rows {
            assert_eq!(r.iter().map(|x| x.1).sum::<f64>(), 1.0);
        }
        assert!(build_entity_targets(&story(), 3).is_err());
    }

    #[test]
    fn kl_is_zero_at_target_and_log_z_against_uniform() {
        let targets = EntityTargets { z: 3, rows: vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)]] };
        let mut tape = Tape::new();
        let exact = tape.constant(vec![2, 3], targets.dense(0..2)).unwrap();
        let kl = regularization_loss(&mut tape, &[vec![exact, exact]], &targets).unwrap();
        assert_eq!(tape.scalar(kl), 0.0);

        let one_hot = EntityTargets { z: 3, rows: vec![vec![(1, 1.0)]; 2] };
        let uniform = tape.constant(vec![2, 3], vec![1.0 / 3.0; 6]).unwrap();
        let kl = regularization_loss(&mut tape, &[vec![uniform]], &one_hot).unwrap();
        assert!((tape.scalar(kl) - 3f64.ln()).abs() < 1e-15);
    }
}
