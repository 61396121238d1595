use std::ops::Range;

use crate::corpus::AnnotatedNarrative;
use crate::error::{Error, Result};

/// One mention located in sentence and section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionRef {
    pub sentence: usize,
    pub span: Range<usize>,
    pub section: usize,
}

/// Mentions of every entity, sorted by start, with the narrative cut into
/// `sections` parts of `ceil(T / sections)` tokens (the last may be shorter).
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMentionIndex {
    pub num_tokens: usize,
    pub sections: usize,
    pub section_size: usize,
    /// Indexed by entity id; ids without mentions have empty lists.
    pub entities: Vec<Vec<MentionRef>>,
}

impl EntityMentionIndex {
    pub fn new(narrative: &AnnotatedNarrative, sections: usize) -> Result<Self> {
        if sections == 0 {
            return Err(Error::Config("need at least one section".into()));
        }
        let num_tokens = narrative.len();
        let section_size = num_tokens.div_ceil(sections).max(1);
        let mut entities = vec![Vec::new(); narrative.num_entities()];
        for m in &narrative.mentions {
            entities[m.entity].push(MentionRef {
                sentence: narrative.sentence_of(m.start),
                span: m.span(),
                section: m.start / section_size,
            });
        }
        for list in &mut entities {
            list.sort_by_key(|r| (r.span.start, r.span.end));
        }
        Ok(Self { num_tokens, sections, section_size, entities })
    }

    pub fn section_of(&self, token: usize) -> usize {
        token / self.section_size
    }

    /// Token range of every section.
    pub fn section_ranges(&self) -> Vec<Range<usize>> {
        (0..self.sections)
            .map(|s| {
                let start = (s * self.section_size).min(self.num_tokens);
                start..((s + 1) * self.section_size).min(self.num_tokens)
            })
            .collect()
    }

    pub fn num_mentions(&self) -> usize {
        self.entities.iter().map(Vec::len).sum()
    }

    /// Ids of entities with at least one mention.
    pub fn mentioned(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.entities.len()).filter(|&e| !self.entities[e].is_empty())
    }

    /// The `top_k` most mentioned entities; ties go to the earlier first
    /// mention.
    pub fn protagonists(&self, top_k: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self.mentioned().collect();
        ids.sort_by_key(|&e| (std::cmp::Reverse(self.entities[e].len()), self.entities[e][0].span.start));
        ids.truncate(top_k);
        ids
    }
}

/// `(unique entities, mentions per entity)`; the ratio is undefined
/// without entities.
pub fn entity_usage_stats(index: &EntityMentionIndex) -> (usize, Option<f64>) {
    let unique = index.mentioned().count();
    let ratio = (unique > 0).then(|| index.num_mentions() as f64 / unique as f64);
    (unique, ratio)
}
