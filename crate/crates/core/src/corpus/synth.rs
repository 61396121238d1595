//! Template-based synthetic narratives with known entity structure.
//!
//! A story is planned before it is written: every entity gets a set of
//! sections, a number of sentences in each, and an attribute pool. The text
//! is then realized from fixed-length sentence templates, so sections,
//! sentences and attributes are known exactly and the expected metric values
//! fall out of the plan.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedNarrative, Mention, TAG_ADJ, TAG_OTHER, TAG_VERB};
use crate::error::{Error, Result};

pub const NAMES: &[&str] = &[
    "Harper", "Jenny", "Todd", "Mara", "Silas", "Ida", "Rook", "Elena", "Boris", "Wren", "Cato", "Lena", "Otto",
    "Petra", "Jonah", "Vera", "Hugo", "Nell", "Abel", "Greta", "Milo", "Tess", "Ezra", "Clara", "Dov", "Fern",
    "Gideon", "Hazel", "Ivo", "June", "Knox", "Lyra", "Moss", "Nora", "Orin", "Pia", "Quill", "Rhea", "Soren",
    "Thea",
];

pub const TITLES: &[&str] = &[
    "sheriff", "captain", "doctor", "judge", "baker", "pilot", "sergeant", "widow", "bishop", "smith",
];

pub const VERBS: &[&str] = &[
    "carried", "found", "painted", "burned", "hid", "opened", "buried", "sold", "mended", "stole", "washed",
    "guarded", "signed", "broke", "lifted", "traded", "cleaned", "chased", "dropped", "built", "counted",
    "loaded", "kicked", "folded", "sharpened", "tied", "carved", "lit", "polished", "wrapped", "pushed", "weighed",
    "shook", "dragged", "tested", "cooked", "pulled", "fed", "stitched", "rolled",
];

pub const ADJECTIVES: &[&str] = &[
    "red", "old", "heavy", "broken", "silver", "quiet", "narrow", "bright", "wooden", "cold", "dusty", "tall",
    "green", "crooked", "soft", "bitter", "round", "pale", "golden", "rusty", "sharp", "empty", "warm", "tiny",
    "black", "wide", "damp", "smooth", "strange", "hollow", "thin", "loud", "white", "plain", "sour", "deep",
    "brittle", "shiny", "faded", "grey",
];

pub const NOUNS: &[&str] = &[
    "box", "lamp", "horse", "letter", "rope", "wagon", "knife", "coat", "bell", "map", "key", "barrel", "hat",
    "stone", "gate", "cup", "bridge", "saddle", "clock", "ledger",
];

pub const FILLERS: &[&str] = &[
    "in", "at", "near", "then", "again", "by", "the", "town", "road", "river", "morning", "night", "long",
    "after", "before", "rain", "wind", "field", "market", "hill",
];

/// Words opening a sentence that mentions an entity.
pub const CUES: &[&str] = &["later", "meanwhile", "suddenly", "today", "once"];

/// Words opening a sentence without an entity.
pub const STARTERS: &[&str] = &["outside", "somewhere", "everywhere", "nearby", "elsewhere"];

/// Shortest sentence able to hold the entity template with a title.
pub const MIN_SENTENCE_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_stories: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Number of sections L.
    pub sections: usize,
    pub sentences_per_section: usize,
    /// Tokens per sentence, including the final `.`.
    pub sentence_len: usize,
    /// Range of the section span between an entity's first and last mention.
    pub min_span: usize,
    pub max_span: usize,
    /// Chance that an entity also appears in a section strictly inside its span.
    pub middle_prob: f64,
    /// Chance of an extra mention in a section the entity already appears in.
    pub extra_mention_prob: f64,
    /// Private verbs and adjectives per entity.
    pub attributes_per_entity: usize,
    /// Attributes shared by all entities of a story; 0 makes pools disjoint.
    pub shared_attributes: usize,
    /// Chance that a sentence draws from the shared pool.
    pub shared_prob: f64,
    /// Chance that an entity's surface carries a title before its name.
    pub title_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_stories: 20,
            min_entities: 2,
            max_entities: 4,
            sections: 10,
            sentences_per_section: 4,
            sentence_len: 10,
            min_span: 0,
            max_span: 9,
            middle_prob: 0.4,
            extra_mention_prob: 0.2,
            attributes_per_entity: 3,
            shared_attributes: 2,
            shared_prob: 0.2,
            title_prob: 0.5,
            seed: 7,
        }
    }
}

/// Metric values implied by a story's plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryTruth {
    pub story_id: String,
    pub coherence: f64,
    pub coherence_avg: f64,
    /// Per-entity consistency in entity-id order.
    pub consistency: Vec<f64>,
    pub consistency_mean: f64,
    pub normalized_consistency: f64,
    /// Matches of the story against its own prompt.
    pub exact_match: usize,
    pub subset_match: usize,
    pub unique_entities: usize,
    pub mentions_per_entity: f64,
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_stories == 0 {
            return err("num_stories must be positive".into());
        }
        if self.min_entities == 0 || self.min_entities > self.max_entities {
            return err("need 1 <= min_entities <= max_entities".into());
        }
        if self.max_entities > NAMES.len() || self.max_entities > TITLES.len() {
            return err(format!("at most {} entities per story", NAMES.len().min(TITLES.len())));
        }
        if self.max_entities > self.sentences_per_section {
            return err("max_entities exceeds sentences_per_section; sections could not hold every entity".into());
        }
        if self.sections == 0 {
            return err("sections must be positive".into());
        }
        if self.min_span > self.max_span || self.max_span + 1 > self.sections {
            return err(format!(
                "span range {}..={} infeasible for {} sections",
                self.min_span, self.max_span, self.sections
            ));
        }
        if self.sentence_len < MIN_SENTENCE_LEN {
            return err(format!("sentence_len must be at least {MIN_SENTENCE_LEN}"));
        }
        if self.attributes_per_entity == 0 {
            return err("attributes_per_entity must be positive".into());
        }
        let verbs_needed = self.max_entities * self.attributes_per_entity + self.shared_attributes;
        if verbs_needed > VERBS.len().min(ADJECTIVES.len()) {
            return err(format!("attribute pools need {verbs_needed} words per class"));
        }
        for (name, p) in [
            ("middle_prob", self.middle_prob),
            ("extra_mention_prob", self.extra_mention_prob),
            ("shared_prob", self.shared_prob),
            ("title_prob", self.title_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.shared_prob > 0.0 && self.shared_attributes == 0 {
            return err("shared_prob > 0 needs shared_attributes > 0".into());
        }
        Ok(())
    }

    pub fn story_len(&self) -> usize {
        self.sections * self.sentences_per_section * self.sentence_len
    }
}

/// What one entity sentence says.
#[derive(Debug, Clone, Copy)]
struct Fact {
    entity: usize,
    verb: usize,
    adj: usize,
}

/// Generates the corpus and its expected metric values.
pub fn generate(spec: &SyntheticCorpusSpec) -> Result<(Vec<AnnotatedNarrative>, Vec<StoryTruth>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stories = Vec::with_capacity(spec.num_stories);
    let mut truths = Vec::with_capacity(spec.num_stories);
    for n in 0..spec.num_stories {
        let (story, truth) = generate_story(spec, &format!("synth-{n:05}"), &mut rng);
        stories.push(story);
        truths.push(truth);
    }
    Ok((stories, truths))
}

fn generate_story(spec: &SyntheticCorpusSpec, id: &str, rng: &mut ChaCha8Rng) -> (AnnotatedNarrative, StoryTruth) {
    let l = spec.sections;
    let s = spec.sentences_per_section;
    let z = rng.gen_range(spec.min_entities..=spec.max_entities);

    // Sentences per section for every (planning-order) entity.
    let mut counts = vec![vec![0usize; l]; z];
    for row in counts.iter_mut() {
        let span = rng.gen_range(spec.min_span..=spec.max_span);
        let first = rng.gen_range(0..l - span);
        let last = first + span;
        for (sec, c) in row.iter_mut().enumerate().take(last + 1).skip(first) {
            if sec == first || sec == last || rng.gen_bool(spec.middle_prob) {
                *c = 1;
            }
        }
    }
    // Extra mentions fill free slots; each section holds at most `s`.
    for sec in 0..l {
        let mut used: usize = counts.iter().map(|r| r[sec]).sum();
        for row in counts.iter_mut() {
            if row[sec] > 0 && used < s && rng.gen_bool(spec.extra_mention_prob) {
                row[sec] += 1;
                used += 1;
            }
        }
    }
    // Sentence slots: Some(entity) or filler.
    let mut slots: Vec<Option<usize>> = Vec::with_capacity(l * s);
    for sec in 0..l {
        let mut sec_slots: Vec<Option<usize>> = Vec::with_capacity(s);
        for (e, row) in counts.iter().enumerate() {
            sec_slots.extend(std::iter::repeat_n(Some(e), row[sec]));
        }
        sec_slots.resize(s, None);
        sec_slots.shuffle(rng);
        slots.extend(sec_slots);
    }
    // Renumber entities by first appearance.
    let mut remap = vec![usize::MAX; z];
    let mut next = 0;
    for e in slots.iter().flatten() {
        if remap[*e] == usize::MAX {
            remap[*e] = next;
            next += 1;
        }
    }
    for e in slots.iter_mut().flatten() {
        *e = remap[*e];
    }

    // Surfaces: distinct names and titles.
    let names: Vec<&str> = NAMES.choose_multiple(rng, z).copied().collect();
    let titles: Vec<&str> = TITLES.choose_multiple(rng, z).copied().collect();
    let surfaces: Vec<Vec<String>> = (0..z)
        .map(|e| {
            let mut v = Vec::new();
            if rng.gen_bool(spec.title_prob) {
                v.push(titles[e].to_owned());
            }
            v.push(names[e].to_owned());
            v
        })
        .collect();

    // Attribute pools: indices into VERBS/ADJECTIVES, disjoint across entities.
    let a = spec.attributes_per_entity;
    let mut verb_ids: Vec<usize> = (0..VERBS.len()).collect();
    let mut adj_ids: Vec<usize> = (0..ADJECTIVES.len()).collect();
    verb_ids.shuffle(rng);
    adj_ids.shuffle(rng);
    let own_verbs = |e: usize| &verb_ids[e * a..(e + 1) * a];
    let own_adjs = |e: usize| &adj_ids[e * a..(e + 1) * a];
    let shared_verbs = &verb_ids[z * a..z * a + spec.shared_attributes];
    let shared_adjs = &adj_ids[z * a..z * a + spec.shared_attributes];

    let mut tokens = Vec::with_capacity(spec.story_len());
    let mut tags = Vec::with_capacity(spec.story_len());
    let mut bounds = Vec::with_capacity(slots.len());
    let mut mentions = Vec::new();
    let mut facts: Vec<Fact> = Vec::new();
    let mut sections_of: Vec<Vec<usize>> = vec![Vec::new(); z];
    for (j, slot) in slots.iter().enumerate() {
        let start = tokens.len();
        bounds.push(start);
        let mut push = |w: &str, t: &str, tokens: &mut Vec<String>| {
            tokens.push(w.to_owned());
            tags.push(t.to_owned());
        };
        match *slot {
            Some(e) => {
                let (verb, adj) = if rng.gen_bool(spec.shared_prob) {
                    (*shared_verbs.choose(rng).unwrap(), *shared_adjs.choose(rng).unwrap())
                } else {
                    (*own_verbs(e).choose(rng).unwrap(), *own_adjs(e).choose(rng).unwrap())
                };
                facts.push(Fact { entity: e, verb, adj });
                sections_of[e].push(j / s);
                push(CUES.choose(rng).unwrap(), TAG_OTHER, &mut tokens);
                let m_start = tokens.len();
                for w in &surfaces[e] {
                    push(w, TAG_OTHER, &mut tokens);
                }
                mentions.push(Mention { entity: e, start: m_start, end: tokens.len() });
                push(VERBS[verb], TAG_VERB, &mut tokens);
                push("the", TAG_OTHER, &mut tokens);
                push(ADJECTIVES[adj], TAG_ADJ, &mut tokens);
                push(NOUNS.choose(rng).unwrap(), TAG_OTHER, &mut tokens);
            }
            None => push(STARTERS.choose(rng).unwrap(), TAG_OTHER, &mut tokens),
        }
        while tokens.len() < start + spec.sentence_len - 1 {
            push(FILLERS.choose(rng).unwrap(), TAG_OTHER, &mut tokens);
        }
        push(".", TAG_OTHER, &mut tokens);
    }

    let story = AnnotatedNarrative {
        story_id: id.to_owned(),
        tokens,
        sentence_bounds: bounds,
        mentions,
        pos_tags: tags,
    };
    let truth = plan_truth(id, l, &sections_of, &facts);
    (story, truth)
}

/// Expected metrics computed from the plan rather than from the text.
fn plan_truth(id: &str, l: usize, sections_of: &[Vec<usize>], facts: &[Fact]) -> StoryTruth {
    let z = sections_of.len();
    // Ids follow first appearance, so sorting by count (stable) breaks ties
    // by first mention.
    let mut order: Vec<usize> = (0..z).collect();
    order.sort_by(|a, b| sections_of[*b].len().cmp(&sections_of[*a].len()));
    let protagonists = &order[..z.min(3)];
    let k = protagonists.len() as f64;
    let coherence = protagonists
        .iter()
        .map(|&e| (sections_of[e].last().unwrap() - sections_of[e][0]) as f64)
        .sum::<f64>()
        / k;
    let coherence_avg = protagonists
        .iter()
        .map(|&e| sections_of[e].iter().collect::<BTreeSet<_>>().len() as f64)
        .sum::<f64>()
        / k;

    // Attributes are (class, index) pairs: verbs and adjectives never share a
    // surface form.
    let attrs = |e: usize| -> BTreeSet<(u8, usize)> {
        facts
            .iter()
            .filter(|f| f.entity == e)
            .flat_map(|f| [(0u8, f.verb), (1u8, f.adj)])
            .collect()
    };
    let consistency: Vec<f64> = (0..z)
        .map(|e| {
            let own = attrs(e);
            let others: BTreeSet<(u8, usize)> = (0..z).filter(|&o| o != e).flat_map(attrs).collect();
            100.0 * own.difference(&others).count() as f64 / own.len() as f64
        })
        .collect();
    let v_sum: f64 = consistency.iter().sum();
    let consistency_mean = v_sum / z as f64;
    let normalized_consistency = coherence / (l * z) as f64 * v_sum;
    StoryTruth {
        story_id: id.to_owned(),
        coherence,
        coherence_avg,
        consistency,
        consistency_mean,
        normalized_consistency,
        exact_match: z,
        subset_match: z,
        unique_entities: z,
        mentions_per_entity: facts.len() as f64 / z as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_classes_are_disjoint() {
        let mut all: Vec<String> = [NAMES, TITLES, VERBS, ADJECTIVES, NOUNS, FILLERS, CUES, STARTERS]
            .iter()
            .flat_map(|l| l.iter().map(|w| w.to_lowercase()))
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn stories_are_valid_and_deterministic() {
        let spec = SyntheticCorpusSpec::default();
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        for s in &a {
            assert_eq!(s.len(), spec.story_len());
            s.validate().unwrap();
            // Ids in first-appearance order.
            let mut seen = 0;
            for m in &s.mentions {
                assert!(m.entity <= seen);
                if m.entity == seen {
                    seen += 1;
                }
            }
        }
    }

    #[test]
    fn full_span_entity_has_maximal_coherence() {
        let spec = SyntheticCorpusSpec {
            min_entities: 1,
            max_entities: 1,
            min_span: 9,
            max_span: 9,
            middle_prob: 1.0,
            ..Default::default()
        };
        let (_, truth) = generate(&spec).unwrap();
        for t in truth {
            assert_eq!(t.coherence, 9.0);
            assert_eq!(t.coherence_avg, 10.0);
        }
    }

    #[test]
    fn disjoint_pools_give_full_consistency() {
        let spec = SyntheticCorpusSpec { shared_attributes: 0, shared_prob: 0.0, ..Default::default() };
        let (_, truth) = generate(&spec).unwrap();
        for t in truth {
            assert!(t.consistency.iter().all(|&v| v == 100.0));
        }
    }

    #[test]
    fn infeasible_span_is_rejected() {
        let spec = SyntheticCorpusSpec { max_span: 10, ..Default::default() };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }
}
