//! Limited-context study: score trained models at several cache sizes and
//! report how much entity-mention NLL degrades relative to the largest.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::synth::{self, SyntheticCorpusSpec};
use crate::corpus::{AnnotatedNarrative, EntityPrompt, Vocab};
use crate::error::{Error, Result};
use crate::metrics::EntityMentionIndex;
use crate::model::{MemoryInit, Model, ModelConfig, Variant};
use crate::par;
use crate::train::{prepare, train_loop, TrainConfig};

/// A model that can be scored with its cache capped at a given size.
pub trait SweepModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Per-token NLL of the narrative (prompt excluded, no end token).
    fn nll_at(&self, cache_size: usize, prompt: &EntityPrompt, narrative: &AnnotatedNarrative, vocab: &Vocab)
        -> Result<Vec<f64>>;
}

impl SweepModel for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn nll_at(&self, cache_size: usize, prompt: &EntityPrompt, narrative: &AnnotatedNarrative, vocab: &Vocab) -> Result<Vec<f64>> {
        let ids = vocab.encode(&narrative.tokens);
        let scored = if cache_size == self.config.cache_size {
            self.teacher_force(&prompt.encode(vocab), &ids, MemoryInit::Prompt)?
        } else {
            let mut m = self.clone();
            m.config.cache_size = cache_size;
            m.teacher_force(&prompt.encode(vocab), &ids, MemoryInit::Prompt)?
        };
        let mut nll = scored.nll;
        nll.truncate(ids.len());
        Ok(nll)
    }
}

pub struct SweepEntry<'a> {
    pub variant: String,
    pub seed: u64,
    pub model: &'a dyn SweepModel,
}

/// Per-token NLL of one story at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDump {
    pub variant: String,
    pub seed: u64,
    pub cache_size: usize,
    pub story_id: String,
    pub nll: Vec<f64>,
    pub in_mention: Vec<bool>,
    pub section: Vec<usize>,
}

/// Pooled NLL of one model at one cache size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub variant: String,
    pub seed: u64,
    pub cache_size: usize,
    pub nll: f64,
    pub nll_entity: Option<f64>,
    pub nll_rest: Option<f64>,
    pub nll_entity_per_section: Vec<Option<f64>>,
}

/// `(nll_m - nll_base) / nll_base` for one variant, seed, cache size and
/// section; `section` is `None` for all mention tokens pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub variant: String,
    pub seed: u64,
    pub cache_size: usize,
    pub section: Option<usize>,
    pub nll_entity: Option<f64>,
    pub baseline: Option<f64>,
    pub degradation: Option<f64>,
}

/// Degradation averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub cache_size: usize,
    pub seeds: usize,
    pub mean_degradation: Option<f64>,
    pub mean_degradation_per_section: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub baseline_cache: usize,
    pub cache_sizes: Vec<usize>,
    pub sections: usize,
    pub points: Vec<SweepPoint>,
    pub rows: Vec<DegradationRow>,
    pub summary: Vec<VariantSummary>,
}

fn ratio(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

fn degradation(value: Option<f64>, base: Option<f64>) -> Option<f64> {
    match (value, base) {
        (Some(v), Some(b)) if b != 0.0 => Some((v - b) / b),
        _ => None,
    }
}

/// Pools a set of dumps (one model, one cache size) into a sweep point.
pub fn pool(dumps: &[&TokenDump], sections: usize) -> (f64, Option<f64>, Option<f64>, Vec<Option<f64>>) {
    let (mut all, mut n_all, mut ent, mut n_ent, mut rest, mut n_rest) = (0.0, 0, 0.0, 0, 0.0, 0);
    let mut sec = vec![(0.0, 0usize); sections];
    for d in dumps {
        for ((&x, &m), &s) in d.nll.iter().zip(&d.in_mention).zip(&d.section) {
            all += x;
            n_all += 1;
            if m {
                ent += x;
                n_ent += 1;
                sec[s].0 += x;
                sec[s].1 += 1;
            } else {
                rest += x;
                n_rest += 1;
            }
        }
    }
    (
        ratio(all, n_all).unwrap_or(f64::NAN),
        ratio(ent, n_ent),
        ratio(rest, n_rest),
        sec.into_iter().map(|(s, n)| ratio(s, n)).collect(),
    )
}

/// Builds points, rows and summaries from raw dumps. Kept separate from
/// scoring so tables can be recomputed from saved dumps.
pub fn tabulate(dumps: &[TokenDump], cache_sizes: &[usize], sections: usize) -> Result<DegradationReport> {
    let baseline_cache = *cache_sizes.iter().max().ok_or_else(|| Error::Config("empty cache sweep".into()))?;
    let mut keys: Vec<(String, u64)> = Vec::new();
    for d in dumps {
        if !keys.iter().any(|k| k.0 == d.variant && k.1 == d.seed) {
            keys.push((d.variant.clone(), d.seed));
        }
    }
    let mut points = Vec::new();
    for (variant, seed) in &keys {
        for &c in cache_sizes {
            let sel: Vec<&TokenDump> =
                dumps.iter().filter(|d| &d.variant == variant && d.seed == *seed && d.cache_size == c).collect();
            let (nll, nll_entity, nll_rest, per) = pool(&sel, sections);
            points.push(SweepPoint {
                variant: variant.clone(),
                seed: *seed,
                cache_size: c,
                nll,
                nll_entity,
                nll_rest,
                nll_entity_per_section: per,
            });
        }
    }
    let find = |v: &str, s: u64, c: usize| points.iter().find(|p| p.variant == v && p.seed == s && p.cache_size == c);
    let mut rows = Vec::new();
    for p in &points {
        let base = find(&p.variant, p.seed, baseline_cache).expect("baseline point");
        rows.push(DegradationRow {
            variant: p.variant.clone(),
            seed: p.seed,
            cache_size: p.cache_size,
            section: None,
            nll_entity: p.nll_entity,
            baseline: base.nll_entity,
            degradation: degradation(p.nll_entity, base.nll_entity),
        });
        for s in 0..sections {
            let (v, b) = (p.nll_entity_per_section[s], base.nll_entity_per_section[s]);
            rows.push(DegradationRow {
                variant: p.variant.clone(),
                seed: p.seed,
                cache_size: p.cache_size,
                section: Some(s),
                nll_entity: v,
                baseline: b,
                degradation: degradation(v, b),
            });
        }
    }
    let mut variants: Vec<String> = Vec::new();
    for (v, _) in &keys {
        if !variants.contains(v) {
            variants.push(v.clone());
        }
    }
    let mut summary = Vec::new();
    for v in &variants {
        for &c in cache_sizes {
            let mean_over = |section: Option<usize>| {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| &r.variant == v && r.cache_size == c && r.section == section)
                    .filter_map(|r| r.degradation)
                    .collect();
                ratio(vals.iter().sum(), vals.len())
            };
            summary.push(VariantSummary {
                variant: v.clone(),
                cache_size: c,
                seeds: keys.iter().filter(|k| &k.0 == v).count(),
                mean_degradation: mean_over(None),
                mean_degradation_per_section: (0..sections).map(|s| mean_over(Some(s))).collect(),
            });
        }
    }
    Ok(DegradationReport { baseline_cache, cache_sizes: cache_sizes.to_vec(), sections, points, rows, summary })
}

/// Scores every entry at every cache size on `corpus`.
pub fn run_sweep(
    entries: &[SweepEntry<'_>],
    vocab: &Vocab,
    corpus: &[AnnotatedNarrative],
    cache_sizes: &[usize],
    sections: usize,
) -> Result<(DegradationReport, Vec<TokenDump>)> {
    if entries.is_empty() || cache_sizes.is_empty() {
        return Err(Error::Config("need at least one model and one cache size".into()));
    }
    if sections == 0 {
        return Err(Error::Config("sections must be positive".into()));
    }
    for e in entries {
        if e.model.vocab_size() != vocab.len() {
            return Err(Error::Input(format!(
                "{} model has vocabulary {} but the corpus vocabulary has {}",
                e.variant,
                e.model.vocab_size(),
                vocab.len()
            )));
        }
    }
    let prepared: Vec<(EntityPrompt, EntityMentionIndex, Vec<bool>)> = corpus
        .iter()
        .map(|n| {
            let idx = EntityMentionIndex::new(n, sections)?;
            let mut in_mention = vec![false; n.len()];
            for m in &n.mentions {
                in_mention[m.span()].iter_mut().for_each(|x| *x = true);
            }
            Ok((EntityPrompt::from_narrative(n), idx, in_mention))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..entries.len())
        .flat_map(|e| cache_sizes.iter().flat_map(move |&c| (0..corpus.len()).map(move |s| (e, c, s))))
        .collect();
    let dumps = par::map(&jobs, par::worker_count(), |_, &(e, c, s)| {
        let (prompt, idx, in_mention) = &prepared[s];
        let nll = entries[e].model.nll_at(c, prompt, &corpus[s], vocab)?;
        Ok(TokenDump {
            variant: entries[e].variant.clone(),
            seed: entries[e].seed,
            cache_size: c,
            story_id: corpus[s].story_id.clone(),
            section: (0..nll.len()).map(|i| idx.section_of(i)).collect(),
            in_mention: in_mention.clone(),
            nll,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((tabulate(&dumps, cache_sizes, sections)?, dumps))
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl DegradationReport {
    /// `variant,seed,cache_size,section,nll_entity,baseline,degradation`;
    /// the pooled row has section `all`.
    pub fn write_rows_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        writeln!(w, "variant,seed,cache_size,section,nll_entity,baseline,degradation").map_err(io)?;
        for r in &self.rows {
            let section = r.section.map_or_else(|| "all".to_owned(), |s| s.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                r.cache_size,
                section,
                cell(r.nll_entity),
                cell(r.baseline),
                cell(r.degradation)
            )
            .map_err(io)?;
        }
        Ok(())
    }

    /// `variant,seed,cache_size,nll,nll_entity,nll_rest`.
    pub fn write_points_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        writeln!(w, "variant,seed,cache_size,nll,nll_entity,nll_rest").map_err(io)?;
        for p in &self.points {
            writeln!(w, "{},{},{},{},{},{}", p.variant, p.seed, p.cache_size, p.nll, cell(p.nll_entity), cell(p.nll_rest))
                .map_err(io)?;
        }
        Ok(())
    }

    /// Seed-averaged table: one row per variant and cache size, pooled
    /// degradation followed by one column per section.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        let mut header = "variant,cache_size,seeds,degradation".to_owned();
        for s in 0..self.sections {
            write!(header, ",section_{s}").expect("string write");
        }
        writeln!(w, "{header}").map_err(io)?;
        for s in &self.summary {
            let mut line = format!("{},{},{},{}", s.variant, s.cache_size, s.seeds, cell(s.mean_degradation));
            for x in &s.mean_degradation_per_section {
                line.push(',');
                line.push_str(&cell(*x));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        Ok(())
    }

    pub fn summary_for(&self, variant: &str, cache_size: usize) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant && s.cache_size == cache_size)
    }

    /// Line chart of seed-averaged degradation per section, one line per
    /// variant and non-baseline cache size.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 50.0);
        let lines: Vec<&VariantSummary> = self.summary.iter().filter(|s| s.cache_size != self.baseline_cache).collect();
        let values: Vec<f64> = lines.iter().flat_map(|s| s.mean_degradation_per_section.iter().flatten().copied()).collect();
        let lo = values.iter().copied().fold(0.0, f64::min);
        let hi = values.iter().copied().fold(0.0, f64::max).max(lo + 1e-9);
        let x = |s: usize| pad + (w - 2.0 * pad) * s as f64 / (self.sections.max(2) - 1) as f64;
        let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
        let _ = writeln!(
            svg,
            "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#888\"/>",
            y(0.0),
            w - pad
        );
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">section</text>", w / 2.0, h - 10.0);
        let _ = writeln!(svg, "<text x=\"5\" y=\"{}\">{:.3}</text><text x=\"5\" y=\"{}\">{:.3}</text>", y(hi), hi, y(lo), lo);
        for (k, s) in lines.iter().enumerate() {
            let colour = palette[k % palette.len()];
            let pts: Vec<String> = s
                .mean_degradation_per_section
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| format!("{:.2},{:.2}", x(i), y(v))))
                .collect();
            let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{} cache {}</text>",
                w - pad - 120.0,
                pad + 15.0 * k as f64,
                s.variant,
                s.cache_size
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// A self-contained study: synthetic corpora, a shared architecture,
/// several variants and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub variants: Vec<Variant>,
    pub cache_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub sections: usize,
    pub train_corpus: SyntheticCorpusSpec,
    pub eval_corpus: SyntheticCorpusSpec,
    /// Architecture; `variant`, `seed` and `vocab_size` are filled in per run.
    pub model: ModelConfig,
    /// Optimization; `seed` is filled in per run.
    pub train: TrainConfig,
    /// Also write an SVG chart.
    pub chart: bool,
}

impl Default for ExperimentPlan {
    /// Tiny matched models on stories whose entities are introduced early
    /// and mentioned again up to three sections later. `configs/degradation.json`
    /// holds the same plan.
    fn default() -> Self {
        let train_corpus = SyntheticCorpusSpec {
            num_stories: 200,
            min_entities: 2,
            max_entities: 4,
            sections: 4,
            sentences_per_section: 4,
            sentence_len: 8,
            min_span: 2,
            max_span: 3,
            seed: 11,
            ..SyntheticCorpusSpec::default()
        };
        Self {
            variants: vec![Variant::Vanilla, Variant::Dynamic],
            cache_sizes: vec![160, 64, 32, 8],
            seeds: vec![1, 2, 3],
            sections: 4,
            eval_corpus: SyntheticCorpusSpec { num_stories: 40, seed: 12, ..train_corpus.clone() },
            train_corpus,
            model: ModelConfig {
                num_layers: 2,
                self_heads: 2,
                cross_heads: 2,
                hidden_dim: 32,
                memory_dim: 32,
                ffn_dim: 64,
                seq_len: 32,
                cache_size: 160,
                chunk_size: 32,
                rel_buckets: 16,
                rel_max_distance: 128,
                ..ModelConfig::default()
            },
            train: TrainConfig { steps: 1000, batch_size: 4, learning_rate: 3e-3, lambda: 1.0, ..TrainConfig::default() },
            chart: false,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.cache_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("variants, cache_sizes and seeds must be non-empty".into()));
        }
        if self.sections == 0 {
            return Err(Error::Config("sections must be positive".into()));
        }
        self.train_corpus.validate()?;
        self.eval_corpus.validate()?;
        self.train.validate()
    }

    /// Training corpus, evaluation corpus and their shared vocabulary.
    pub fn corpora(&self) -> Result<(Vec<AnnotatedNarrative>, Vec<AnnotatedNarrative>, Vocab)> {
        let train = synth::generate(&self.train_corpus)?.0;
        let eval = synth::generate(&self.eval_corpus)?.0;
        let vocab = Vocab::build(train.iter().chain(&eval).flat_map(|n| n.tokens.iter().map(String::as_str)));
        Ok((train, eval, vocab))
    }

    pub fn model_config(&self, variant: Variant, seed: u64, vocab: &Vocab) -> ModelConfig {
        ModelConfig { variant, seed, vocab_size: vocab.len(), ..self.model.clone() }
    }
}

pub struct TrainedModel {
    pub variant: Variant,
    pub seed: u64,
    pub model: Model,
}

/// Trains every variant and seed, then runs the sweep on the evaluation
/// corpus. `log` receives progress lines.
pub fn run_plan(plan: &ExperimentPlan, mut log: impl FnMut(&str)) -> Result<(DegradationReport, Vec<TokenDump>, Vec<TrainedModel>)> {
    plan.validate()?;
    let (train, eval, vocab) = plan.corpora()?;
    let examples = prepare(&train, &vocab)?;
    let mut trained = Vec::new();
    for &seed in &plan.seeds {
        for &variant in &plan.variants {
            let mut model = Model::new(plan.model_config(variant, seed, &vocab))?;
            let cfg = TrainConfig { seed, ..plan.train.clone() };
            let trace = train_loop(&mut model, &examples, &cfg, |_, _| {})?;
            let last = trace.last().expect("steps > 0");
            log(&format!("trained {} seed {seed}: final nll {:.4}", variant.name(), last.nll));
            trained.push(TrainedModel { variant, seed, model });
        }
    }
    let entries: Vec<SweepEntry<'_>> = trained
        .iter()
        .map(|t| SweepEntry { variant: t.variant.name().to_owned(), seed: t.seed, model: &t.model })
        .collect();
    let (report, dumps) = run_sweep(&entries, &vocab, &eval, &plan.cache_sizes, plan.sections)?;
    Ok((report, dumps, trained))
}

/// Per-token dumps as CSV: `variant,seed,cache_size,story_id,position,in_mention,section,nll`.
pub fn write_dumps_csv<W: Write>(mut w: W, dumps: &[TokenDump]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    writeln!(w, "variant,seed,cache_size,story_id,position,in_mention,section,nll").map_err(io)?;
    for d in dumps {
        for i in 0..d.nll.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                d.variant,
                d.seed,
                d.cache_size,
                d.story_id,
                i,
                u8::from(d.in_mention[i]),
                d.section[i],
                d.nll[i]
            )
            .map_err(io)?;
        }
    }
    Ok(())
}
