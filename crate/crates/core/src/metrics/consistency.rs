use std::collections::BTreeSet;

use crate::corpus::{is_attribute_tag, AnnotatedNarrative};

/// Per-entity attribute uniqueness and its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    /// `V_i` in percent by entity id; `None` when the entity has no
    /// attributes in its sentences.
    pub per_entity: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

impl Consistency {
    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_entity.iter().flatten().copied()
    }
}

/// Lowercase verb and adjective forms of each sentence.
pub fn sentence_attributes(narrative: &AnnotatedNarrative) -> Vec<BTreeSet<String>> {
    narrative
        .sentences()
        .map(|r| {
            r.filter(|&i| is_attribute_tag(&narrative.pos_tags[i]))
                .map(|i| narrative.tokens[i].to_lowercase())
                .collect()
        })
        .collect()
}

pub fn consistency_v(narrative: &AnnotatedNarrative) -> Consistency {
    let attrs = sentence_attributes(narrative);
    let z = narrative.num_entities();
    let mut present = vec![BTreeSet::new(); z];
    for m in &narrative.mentions {
        present[m.entity].insert(narrative.sentence_of(m.start));
    }
    let per_entity: Vec<Option<f64>> = present
        .iter()
        .map(|sents| {
            let mut own = BTreeSet::new();
            let mut others = BTreeSet::new();
            for (j, a) in attrs.iter().enumerate() {
                if sents.contains(&j) { &mut own } else { &mut others }.extend(a.iter());
            }
            (!own.is_empty()).then(|| 100.0 * own.difference(&others).count() as f64 / own.len() as f64)
        })
        .collect();
    let defined: Vec<f64> = per_entity.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Consistency { per_entity, mean }
}

/// `U = C / (L Z) * Σ V_i`.
pub fn consistency_u(coherence: f64, v: &[f64], sections: usize, entities: usize) -> f64 {
    coherence / (sections * entities) as f64 * v.iter().sum::<f64>()
}
