//! Entity coherence, consistency, prompt matching, usage and language-model
//! uncertainty, per story and averaged over a corpus.

mod coherence;
mod consistency;
mod index;
mod matching;
mod uncertainty;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use coherence::{coherence_avg_sections, coherence_max_span};
pub use consistency::{consistency_u, consistency_v, sentence_attributes, Consistency};
pub use index::{entity_usage_stats, EntityMentionIndex, MentionRef};
pub use matching::{is_stopword, match_gold, MatchCounts, STOPWORDS};
pub use uncertainty::{lm_uncertainty, summarize_nll, TokenScorer, Uncertainty};

use crate::corpus::{AnnotatedNarrative, EntityPrompt, Vocab};
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_SECTIONS: usize = 10;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsConfig {
    pub sections: usize,
    pub top_k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { sections: DEFAULT_SECTIONS, top_k: DEFAULT_TOP_K }
    }
}

/// Every metric for one story. `None` marks an undefined value and
/// serializes as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryMetrics {
    pub story_id: String,
    pub coherence: Option<f64>,
    pub coherence_avg: Option<f64>,
    pub consistency: Option<f64>,
    pub consistency_per_entity: Vec<Option<f64>>,
    pub normalized_consistency: Option<f64>,
    pub exact_match: usize,
    pub subset_match: usize,
    pub gold_entities: usize,
    pub exact_match_fraction: Option<f64>,
    pub subset_match_fraction: Option<f64>,
    pub unique_entities: usize,
    pub mentions_per_entity: Option<f64>,
    pub perplexity: Option<f64>,
    pub nll_entity: Option<f64>,
    pub nll_rest: Option<f64>,
    pub nll_entity_per_section: Vec<Option<f64>>,
}

/// Means over stories where each value is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub stories: usize,
    pub coherence: Option<f64>,
    pub coherence_avg: Option<f64>,
    pub consistency: Option<f64>,
    pub normalized_consistency: Option<f64>,
    pub exact_match: Option<f64>,
    pub subset_match: Option<f64>,
    pub exact_match_fraction: Option<f64>,
    pub subset_match_fraction: Option<f64>,
    pub unique_entities: Option<f64>,
    pub mentions_per_entity: Option<f64>,
    pub perplexity: Option<f64>,
    pub nll_entity: Option<f64>,
    pub nll_rest: Option<f64>,
    pub nll_entity_per_section: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stories: Vec<StoryMetrics>,
    pub aggregate: Aggregate,
}

/// Text-only metrics of one story against its gold prompt.
pub fn story_metrics(narrative: &AnnotatedNarrative, gold: &EntityPrompt, cfg: &MetricsConfig) -> Result<StoryMetrics> {
    let index = EntityMentionIndex::new(narrative, cfg.sections)?;
    Ok(story_metrics_with(narrative, gold, cfg, &index, None))
}

fn story_metrics_with(
    narrative: &AnnotatedNarrative,
    gold: &EntityPrompt,
    cfg: &MetricsConfig,
    index: &EntityMentionIndex,
    unc: Option<Uncertainty>,
) -> StoryMetrics {
    let coherence = coherence_max_span(index, cfg.top_k);
    let v = consistency_v(narrative);
    let (unique, mpe) = entity_usage_stats(index);
    let defined: Vec<f64> = v.defined().collect();
    let normalized = match coherence {
        Some(c) if unique > 0 && !defined.is_empty() => Some(consistency_u(c, &defined, cfg.sections, unique)),
        _ => None,
    };
    let m = match_gold(&narrative.tokens, gold);
    StoryMetrics {
        story_id: narrative.story_id.clone(),
        coherence,
        coherence_avg: coherence_avg_sections(index, cfg.top_k),
        consistency: v.mean,
        consistency_per_entity: v.per_entity,
        normalized_consistency: normalized,
        exact_match: m.exact,
        subset_match: m.subset,
        gold_entities: m.gold,
        exact_match_fraction: m.exact_fraction(),
        subset_match_fraction: m.subset_fraction(),
        unique_entities: unique,
        mentions_per_entity: mpe,
        perplexity: unc.as_ref().map(|u| u.perplexity),
        nll_entity: unc.as_ref().and_then(|u| u.nll_entity),
        nll_rest: unc.as_ref().and_then(|u| u.nll_rest),
        nll_entity_per_section: unc.map_or_else(Vec::new, |u| u.nll_entity_per_section),
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(stories: &[StoryMetrics], sections: usize) -> Aggregate {
    let col = |f: &dyn Fn(&StoryMetrics) -> Option<f64>| mean_of(stories.iter().map(f));
    let per_section = (0..sections)
        .map(|s| mean_of(stories.iter().map(|m| m.nll_entity_per_section.get(s).copied().flatten())))
        .collect();
    Aggregate {
        stories: stories.len(),
        coherence: col(&|m| m.coherence),
        coherence_avg: col(&|m| m.coherence_avg),
        consistency: col(&|m| m.consistency),
        normalized_consistency: col(&|m| m.normalized_consistency),
        exact_match: col(&|m| Some(m.exact_match as f64)),
        subset_match: col(&|m| Some(m.subset_match as f64)),
        exact_match_fraction: col(&|m| m.exact_match_fraction),
        subset_match_fraction: col(&|m| m.subset_match_fraction),
        unique_entities: col(&|m| Some(m.unique_entities as f64)),
        mentions_per_entity: col(&|m| m.mentions_per_entity),
        perplexity: col(&|m| m.perplexity),
        nll_entity: col(&|m| m.nll_entity),
        nll_rest: col(&|m| m.nll_rest),
        nll_entity_per_section: per_section,
    }
}

/// Scores a corpus. `golds` defaults to each story's own prompt; the
/// uncertainty columns need a scorer and its vocabulary.
pub fn analyze(
    narratives: &[AnnotatedNarrative],
    golds: Option<&[EntityPrompt]>,
    cfg: &MetricsConfig,
    scorer: Option<(&dyn TokenScorer, &Vocab)>,
) -> Result<MetricsReport> {
    if cfg.sections == 0 || cfg.top_k == 0 {
        return Err(Error::Config("sections and top_k must be positive".into()));
    }
    if let Some(g) = golds {
        if g.len() != narratives.len() {
            return Err(Error::Input(format!("{} gold prompts for {} stories", g.len(), narratives.len())));
        }
    }
    let rows = par::map(narratives, par::worker_count(), |i, n| {
        let own;
        let gold = match golds {
            Some(g) => &g[i],
            None => {
                own = EntityPrompt::from_narrative(n);
                &own
            }
        };
        let index = EntityMentionIndex::new(n, cfg.sections)?;
        let unc = match scorer {
            Some((s, vocab)) => Some(lm_uncertainty(s, vocab, gold, n, &index)?),
            None => None,
        };
        Ok(story_metrics_with(n, gold, cfg, &index, unc))
    });
    let stories = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&stories, cfg.sections);
    Ok(MetricsReport { stories, aggregate })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

const CSV_HEADER: &str = "story_id,coherence,coherence_avg,consistency,normalized_consistency,exact_match,subset_match,\
gold_entities,exact_match_fraction,subset_match_fraction,unique_entities,mentions_per_entity,perplexity,nll_entity,nll_rest";

impl MetricsReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// One row per story; undefined values are empty cells.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        writeln!(w, "{CSV_HEADER}").map_err(io)?;
        for s in &self.stories {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.story_id,
                opt(s.coherence),
                opt(s.coherence_avg),
                opt(s.consistency),
                opt(s.normalized_consistency),
                s.exact_match,
                s.subset_match,
                s.gold_entities,
                opt(s.exact_match_fraction),
                opt(s.subset_match_fraction),
                s.unique_entities,
                opt(s.mentions_per_entity),
                opt(s.perplexity),
                opt(s.nll_entity),
                opt(s.nll_rest),
            )
            .map_err(io)?;
        }
        Ok(())
    }

    /// Long-format entity-mention NLL per section: `story_id,section,nll_entity`,
    /// with `aggregate` rows last.
    pub fn write_section_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        writeln!(w, "story_id,section,nll_entity").map_err(io)?;
        for s in &self.stories {
            for (k, x) in s.nll_entity_per_section.iter().enumerate() {
                writeln!(w, "{},{},{}", s.story_id, k, opt(*x)).map_err(io)?;
            }
        }
        for (k, x) in self.aggregate.nll_entity_per_section.iter().enumerate() {
            writeln!(w, "aggregate,{},{}", k, opt(*x)).map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => self.write_csv(&mut w)?,
            _ => self.write_json(&mut w)?,
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
