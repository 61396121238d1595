use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, EOP, SEP};
use super::AnnotatedNarrative;
use crate::error::{Error, Result};

/// Canonical surface forms of a story's entities, in entity-id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPrompt {
    pub entities: Vec<Vec<String>>,
}

/// Prompt token ids together with the index range of each entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPrompt {
    pub ids: Vec<usize>,
    pub groups: Vec<Range<usize>>,
}

impl EntityPrompt {
    /// Uses the first mention of every entity as its canonical form.
    pub fn from_narrative(narrative: &AnnotatedNarrative) -> Self {
        let z = narrative.num_entities();
        let mut first: Vec<Option<Range<usize>>> = vec![None; z];
        for m in &narrative.mentions {
            let slot = &mut first[m.entity];
            if slot.as_ref().is_none_or(|r| m.start < r.start) {
                *slot = Some(m.span());
            }
        }
        let entities = first
            .into_iter()
            .map(|r| r.map(|r| narrative.tokens[r].to_vec()).unwrap_or_default())
            .collect();
        Self { entities }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Entity token sequences joined by `<sep>`, terminated by `<eop>`.
    pub fn render(&self) -> Vec<String> {
        let sep = Vocab::special_name(SEP).unwrap();
        let eop = Vocab::special_name(EOP).unwrap();
        let mut out = Vec::new();
        for (i, e) in self.entities.iter().enumerate() {
            if i > 0 {
                out.push(sep.to_owned());
            }
            out.extend(e.iter().cloned());
        }
        out.push(eop.to_owned());
        out
    }

    /// Inverse of [`EntityPrompt::render`].
    pub fn parse(rendered: &[String]) -> Result<Self> {
        let sep = Vocab::special_name(SEP).unwrap();
        let eop = Vocab::special_name(EOP).unwrap();
        let Some((last, body)) = rendered.split_last() else {
            return Err(Error::Input("empty prompt".into()));
        };
        if last != eop {
            return Err(Error::Input("prompt must end with <eop>".into()));
        }
        if body.is_empty() {
            return Ok(Self { entities: vec![] });
        }
        let entities: Vec<Vec<String>> = body.split(|t| t == sep).map(<[String]>::to_vec).collect();
        if entities.iter().any(Vec::is_empty) {
            return Err(Error::Input("prompt contains an empty entity".into()));
        }
        Ok(Self { entities })
    }

    pub fn encode(&self, vocab: &Vocab) -> EncodedPrompt {
        let mut ids = Vec::new();
        let mut groups = Vec::with_capacity(self.entities.len());
        for (i, e) in self.entities.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            let start = ids.len();
            ids.extend(vocab.encode(e));
            groups.push(start..ids.len());
        }
        ids.push(EOP);
        EncodedPrompt { ids, groups }
    }
}
