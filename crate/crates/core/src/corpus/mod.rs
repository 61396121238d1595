//! Annotated narratives, vocabulary, entity prompts, JSONL I/O and the
//! synthetic corpus generator.

mod jsonl;
mod lexicon;
mod prompt;
pub mod synth;
mod vocab;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use jsonl::{load_jsonl, read_jsonl, save_jsonl, write_jsonl};
pub use lexicon::Annotator;
pub use prompt::{EncodedPrompt, EntityPrompt};
pub use vocab::{tokenize_text, Vocab, BOS, EOP, EOS, PAD, SEP, UNK};

/// One bad record found while loading or validating a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    /// 1-based line number, when the record came from a file.
    pub line: Option<usize>,
    pub story_id: Option<String>,
    /// Path to the offending field, e.g. `mentions[2].end`.
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for RecordError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(id) = &self.story_id {
            write!(f, "story {id:?}: ")?;
        }
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed corpus records on lines {lines:?}: {}", first_message(.errors))]
    Malformed { lines: Vec<usize>, errors: Vec<RecordError> },
    #[error("invalid narrative: {0}")]
    Invalid(RecordError),
    #[error("empty corpus")]
    Empty,
}

fn first_message(errors: &[RecordError]) -> String {
    errors.first().map(ToString::to_string).unwrap_or_default()
}

/// A mention of entity `entity` covering tokens `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, usize)", into = "(usize, usize, usize)")]
pub struct Mention {
    pub entity: usize,
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize, usize)> for Mention {
    fn from((entity, start, end): (usize, usize, usize)) -> Self {
        Self { entity, start, end }
    }
}

impl From<Mention> for (usize, usize, usize) {
    fn from(m: Mention) -> Self {
        (m.entity, m.start, m.end)
    }
}

impl Mention {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }
}

pub const TAG_VERB: &str = "VERB";
pub const TAG_ADJ: &str = "ADJ";
pub const TAG_OTHER: &str = "OTHER";

/// Verbs and adjectives count as entity attributes.
pub fn is_attribute_tag(tag: &str) -> bool {
    tag == TAG_VERB || tag == TAG_ADJ
}

/// A tokenized story with sentence boundaries, entity mentions and
/// part-of-speech tags. Entity ids are story-local and dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedNarrative {
    pub story_id: String,
    pub tokens: Vec<String>,
    /// Start offset of every sentence; the first is 0.
    pub sentence_bounds: Vec<usize>,
    pub mentions: Vec<Mention>,
    pub pos_tags: Vec<String>,
}

impl AnnotatedNarrative {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_bounds.len()
    }

    /// Token range of sentence `j`.
    pub fn sentence(&self, j: usize) -> Range<usize> {
        let start = self.sentence_bounds[j];
        let end = self.sentence_bounds.get(j + 1).copied().unwrap_or(self.tokens.len());
        start..end
    }

    pub fn sentences(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.num_sentences()).map(|j| self.sentence(j))
    }

    /// Index of the sentence containing `token`.
    pub fn sentence_of(&self, token: usize) -> usize {
        match self.sentence_bounds.binary_search(&token) {
            Ok(j) => j,
            Err(j) => j - 1,
        }
    }

    /// Number of distinct entities, i.e. one past the largest entity id.
    pub fn num_entities(&self) -> usize {
        self.mentions.iter().map(|m| m.entity + 1).max().unwrap_or(0)
    }

    fn error(&self, field: impl Into<String>, message: impl Into<String>) -> RecordError {
        RecordError {
            line: None,
            story_id: Some(self.story_id.clone()),
            field: field.into(),
            message: message.into(),
        }
    }

    /// Checks every structural invariant; returns all violations found.
    pub fn validate(&self) -> Result<(), Vec<RecordError>> {
        let mut errs = Vec::new();
        let n = self.tokens.len();
        if self.pos_tags.len() != n {
            errs.push(self.error(
                "pos_tags",
                format!("has {} tags for {} tokens", self.pos_tags.len(), n),
            ));
        }
        if n == 0 {
            if !self.sentence_bounds.is_empty() {
                errs.push(self.error("sentence_bounds", "must be empty for an empty story"));
            }
        } else if self.sentence_bounds.first() != Some(&0) {
            errs.push(self.error("sentence_bounds[0]", "first sentence must start at token 0"));
        }
        for (i, w) in self.sentence_bounds.windows(2).enumerate() {
            if w[1] <= w[0] {
                errs.push(self.error(format!("sentence_bounds[{}]", i + 1), "offsets must be strictly increasing"));
            }
        }
        if let Some(&last) = self.sentence_bounds.last() {
            if last >= n {
                errs.push(self.error(
                    format!("sentence_bounds[{}]", self.sentence_bounds.len() - 1),
                    format!("offset {last} is past the last token"),
                ));
            }
        }
        let bounds_ok = errs.is_empty();
        let mut seen = vec![false; self.num_entities()];
        for (i, m) in self.mentions.iter().enumerate() {
            if m.start >= m.end {
                errs.push(self.error(format!("mentions[{i}]"), "empty span"));
                continue;
            }
            if m.end > n {
                errs.push(self.error(format!("mentions[{i}].end"), format!("{} exceeds story length {n}", m.end)));
                continue;
            }
            if bounds_ok && self.sentence_of(m.start) != self.sentence_of(m.end - 1) {
                errs.push(self.error(format!("mentions[{i}]"), "span crosses a sentence boundary"));
            }
            seen[m.entity] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            errs.push(self.error(
                "mentions",
                format!("entity ids must be dense: id {missing} has no mention"),
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}
