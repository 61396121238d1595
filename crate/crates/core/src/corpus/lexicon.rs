use std::collections::HashMap;

use super::{AnnotatedNarrative, EntityPrompt, Mention, TAG_OTHER};

/// Re-annotates raw generated token streams so they can be scored with the
/// same metrics as gold narratives.
///
/// Part-of-speech tags come from a lexicon learned from an annotated corpus
/// (most frequent tag per lowercase word). Mentions are case-insensitive
/// matches of the prompt's entity surfaces, longest first; the last token
/// of a multi-token surface also counts when no other entity shares it.
/// Sentences end after every `.` token.
#[derive(Debug, Clone, Default)]
pub struct Annotator {
    tags: HashMap<String, String>,
}

impl Annotator {
    pub fn from_corpus(corpus: &[AnnotatedNarrative]) -> Self {
        let mut counts: HashMap<String, HashMap<&str, usize>> = HashMap::new();
        for story in corpus {
            for (tok, tag) in story.tokens.iter().zip(&story.pos_tags) {
                *counts.entry(tok.to_lowercase()).or_default().entry(tag).or_default() += 1;
            }
        }
        let tags = counts
            .into_iter()
            .map(|(word, c)| {
                let best = c
                    .into_iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
                    .map(|(t, _)| t.to_owned())
                    .unwrap_or_else(|| TAG_OTHER.to_owned());
                (word, best)
            })
            .collect();
        Self { tags }
    }

    pub fn tag(&self, token: &str) -> &str {
        self.tags.get(&token.to_lowercase()).map_or(TAG_OTHER, String::as_str)
    }

    /// Entity ids follow the prompt order. Entities the text never mentions
    /// simply have no mentions, so ids need not be dense.
    pub fn annotate(&self, story_id: &str, tokens: &[String], prompt: &EntityPrompt) -> AnnotatedNarrative {
        let lower: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
        let mut surfaces: Vec<(usize, Vec<String>)> = Vec::new();
        for (id, e) in prompt.entities.iter().enumerate() {
            if !e.is_empty() {
                surfaces.push((id, e.iter().map(|t| t.to_lowercase()).collect()));
            }
        }
        let mut short: Vec<(usize, Vec<String>)> = Vec::new();
        for (id, s) in &surfaces {
            if s.len() > 1 {
                let last = s.last().unwrap();
                let shared = surfaces.iter().any(|(o, t)| o != id && t.contains(last));
                if !shared {
                    short.push((*id, vec![last.clone()]));
                }
            }
        }
        surfaces.extend(short);
        surfaces.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

        let mut sentence_bounds = Vec::new();
        let mut mentions = Vec::new();
        let mut at_start = true;
        let mut i = 0;
        while i < lower.len() {
            if at_start {
                sentence_bounds.push(i);
                at_start = false;
            }
            let hit = surfaces.iter().find(|(_, s)| {
                i + s.len() <= lower.len()
                    && lower[i..i + s.len()] == s[..]
                    && !lower[i..i + s.len() - 1].iter().any(|t| t == ".")
            });
            let step = match hit {
                Some((id, s)) => {
                    mentions.push(Mention { entity: *id, start: i, end: i + s.len() });
                    s.len()
                }
                None => 1,
            };
            if lower[i + step - 1] == "." {
                at_start = true;
            }
            i += step;
        }
        AnnotatedNarrative {
            story_id: story_id.to_owned(),
            tokens: tokens.to_vec(),
            sentence_bounds,
            mentions,
            pos_tags: tokens.iter().map(|t| self.tag(t).to_owned()).collect(),
        }
    }
}
