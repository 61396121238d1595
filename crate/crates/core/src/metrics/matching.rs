use serde::{Deserialize, Serialize};

use crate::corpus::EntityPrompt;

/// Words that never count toward a subset match.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "to", "for", "from", "by", "with", "and", "or", "but", "as", "into",
    "onto", "over", "under", "about", "after", "before", "i", "me", "my", "you", "your", "he", "him", "his", "she",
    "her", "it", "its", "we", "us", "our", "they", "them", "their", "this", "that", "these", "those", "who", "whom",
    "which", "what", ".", ",", "!", "?", ";", ":", "'", "\"", "-", "<sep>", "<eop>",
];

pub fn is_stopword(token: &str) -> bool {
    let t = token.to_lowercase();
    STOPWORDS.contains(&t.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub exact: usize,
    pub subset: usize,
    /// Number of gold entities.
    pub gold: usize,
}

impl MatchCounts {
    pub fn exact_fraction(&self) -> Option<f64> {
        (self.gold > 0).then(|| self.exact as f64 / self.gold as f64)
    }

    pub fn subset_fraction(&self) -> Option<f64> {
        (self.gold > 0).then(|| self.subset as f64 / self.gold as f64)
    }
}

/// Gold entities whose full surface occurs as a contiguous case-insensitive
/// token run (exact), and those with at least one content token present
/// (subset). An exact match always counts as a subset match.
pub fn match_gold<S: AsRef<str>>(generated: &[S], gold: &EntityPrompt) -> MatchCounts {
    let text: Vec<String> = generated.iter().map(|t| t.as_ref().to_lowercase()).collect();
    let mut counts = MatchCounts { exact: 0, subset: 0, gold: gold.entities.len() };
    for surface in &gold.entities {
        let surface: Vec<String> = surface.iter().map(|t| t.to_lowercase()).collect();
        let exact = !surface.is_empty() && text.windows(surface.len()).any(|w| w == surface.as_slice());
        let partial = surface.iter().any(|t| !is_stopword(t) && text.contains(t));
        counts.exact += usize::from(exact);
        counts.subset += usize::from(exact || partial);
    }
    counts
}
