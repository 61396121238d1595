use serde::{Deserialize, Serialize};

use super::index::EntityMentionIndex;
use crate::corpus::{AnnotatedNarrative, EntityPrompt, Vocab};
use crate::error::{Error, Result};
use crate::model::{MemoryInit, Model};

/// Anything that assigns a teacher-forced NLL to every narrative token.
pub trait TokenScorer: Sync {
    fn vocab_size(&self) -> usize;

    /// One NLL per narrative token, prompt excluded.
    fn narrative_nll(&self, prompt: &EntityPrompt, narrative: &AnnotatedNarrative, vocab: &Vocab) -> Result<Vec<f64>>;
}

impl TokenScorer for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn narrative_nll(&self, prompt: &EntityPrompt, narrative: &AnnotatedNarrative, vocab: &Vocab) -> Result<Vec<f64>> {
        let ids = vocab.encode(&narrative.tokens);
        let mut nll = self.teacher_force(&prompt.encode(vocab), &ids, MemoryInit::Prompt)?.nll;
        nll.truncate(ids.len());
        Ok(nll)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub perplexity: f64,
    pub nll: f64,
    pub nll_entity: Option<f64>,
    pub nll_rest: Option<f64>,
    pub nll_entity_per_section: Vec<Option<f64>>,
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Splits per-token NLL into mention and non-mention means, overall and
/// by section.
pub fn summarize_nll(nll: &[f64], narrative: &AnnotatedNarrative, index: &EntityMentionIndex) -> Result<Uncertainty> {
    if nll.len() != narrative.len() {
        return Err(Error::Input(format!("{} scores for {} tokens", nll.len(), narrative.len())));
    }
    if nll.is_empty() {
        return Err(Error::Input(format!("story {} is empty", narrative.story_id)));
    }
    let mut in_mention = vec![false; nll.len()];
    for m in &narrative.mentions {
        in_mention[m.span()].iter_mut().for_each(|x| *x = true);
    }
    let (mut ent, mut n_ent, mut rest, mut n_rest) = (0.0, 0, 0.0, 0);
    let mut sec = vec![(0.0, 0usize); index.sections];
    for (i, (&x, &m)) in nll.iter().zip(&in_mention).enumerate() {
        if m {
            ent += x;
            n_ent += 1;
            let s = &mut sec[index.section_of(i)];
            s.0 += x;
            s.1 += 1;
        } else {
            rest += x;
            n_rest += 1;
        }
    }
    let total = nll.iter().sum::<f64>() / nll.len() as f64;
    Ok(Uncertainty {
        perplexity: total.exp(),
        nll: total,
        nll_entity: mean(ent, n_ent),
        nll_rest: mean(rest, n_rest),
        nll_entity_per_section: sec.into_iter().map(|(s, n)| mean(s, n)).collect(),
    })
}

pub fn lm_uncertainty(
    scorer: &dyn TokenScorer,
    vocab: &Vocab,
    prompt: &EntityPrompt,
    narrative: &AnnotatedNarrative,
    index: &EntityMentionIndex,
) -> Result<Uncertainty> {
    if scorer.vocab_size() != vocab.len() {
        return Err(Error::Input(format!(
            "model vocabulary has {} entries but the corpus vocabulary has {}",
            scorer.vocab_size(),
            vocab.len()
        )));
    }
    let nll = scorer.narrative_nll(prompt, narrative, vocab)?;
    summarize_nll(&nll, narrative, index)
}
