use std::collections::BTreeSet;

use super::index::EntityMentionIndex;

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> Option<f64> {
    let n = xs.len();
    (n > 0).then(|| xs.sum::<f64>() / n as f64)
}

/// Mean over protagonists of last minus first mention section. Undefined
/// without mentions.
pub fn coherence_max_span(index: &EntityMentionIndex, top_k: usize) -> Option<f64> {
    let p = index.protagonists(top_k);
    mean(p.iter().map(|&e| {
        let m = &index.entities[e];
        let first = m.iter().map(|r| r.section).min().unwrap_or(0);
        let last = m.iter().map(|r| r.section).max().unwrap_or(0);
        (last - first) as f64
    }))
}

/// Mean over protagonists of the number of distinct sections they appear in.
pub fn coherence_avg_sections(index: &EntityMentionIndex, top_k: usize) -> Option<f64> {
    let p = index.protagonists(top_k);
    mean(p.iter().map(|&e| index.entities[e].iter().map(|r| r.section).collect::<BTreeSet<_>>().len() as f64))
}
