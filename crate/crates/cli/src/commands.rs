use std::collections::HashMap;
use std::path::Path;

use mneme_core::corpus::synth::{self, SyntheticCorpusSpec};
use mneme_core::corpus::{save_jsonl, tokenize_text, AnnotatedNarrative, Annotator, EntityPrompt, Vocab};
use mneme_core::experiment::{self, run_plan, run_sweep, ExperimentPlan, SweepEntry};
use mneme_core::generate::{generate_all, save_samples, GenerateConfig, GeneratedSample};
use mneme_core::metrics::{analyze as analyze_corpus, MetricsConfig};
use mneme_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use mneme_core::train::{prepare, save_trace_csv, train_loop, TrainConfig};
use mneme_core::Error as CoreError;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};
use crate::io::{ensure_dir, load_corpus, load_prompts, read_config, sibling, write_bytes, write_text};
use crate::{AnalyzeArgs, DegradationArgs, EvalArgs, GenerateArgs, SynthArgs, TrainArgs};

fn field_names<T: serde::Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Splits a flat config object into training and model parts. `seed`
/// belongs to both.
fn split_train_config(value: Value) -> CliResult<(TrainConfig, ModelConfig)> {
    let Value::Object(obj) = value else {
        return Err(CoreError::Config("training config must be a JSON object".into()).into());
    };
    let train_keys = field_names::<TrainConfig>();
    let model_keys = field_names::<ModelConfig>();
    let (mut t, mut m) = (Map::new(), Map::new());
    for (k, v) in obj {
        let in_train = train_keys.contains(&k);
        let in_model = model_keys.contains(&k);
        if !in_train && !in_model {
            return Err(CoreError::Config(format!("unknown config field {k:?}")).into());
        }
        if in_train {
            t.insert(k.clone(), v.clone());
        }
        if in_model {
            m.insert(k, v);
        }
    }
    let cfg = |e: serde_json::Error| CliError::from(CoreError::Config(e.to_string()));
    Ok((serde_json::from_value(Value::Object(t)).map_err(cfg)?, serde_json::from_value(Value::Object(m)).map_err(cfg)?))
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let (mut tcfg, mut mcfg) = split_train_config(read_config(&a.config)?)?;
    if let Some(seed) = a.seed {
        tcfg.seed = seed;
        mcfg.seed = seed;
    }
    if let Some(v) = a.variant {
        mcfg.variant = v;
    }
    if let Some(c) = a.cache_size {
        mcfg.cache_size = c;
    }
    tcfg.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let vocab = Vocab::build(corpus.iter().flat_map(|n| n.tokens.iter().map(String::as_str)));
    if mcfg.vocab_size != 0 && mcfg.vocab_size != vocab.len() {
        return Err(CoreError::Config(format!(
            "vocab_size {} does not match the corpus vocabulary of {}",
            mcfg.vocab_size,
            vocab.len()
        ))
        .into());
    }
    mcfg.vocab_size = vocab.len();
    let mut model = Model::new(mcfg)?;
    let examples = prepare(&corpus, &vocab)?;
    eprintln!(
        "training {} on {} stories, {} parameters, {} steps",
        model.variant().name(),
        examples.len(),
        model.params.num_scalars(),
        tcfg.steps
    );
    let every = (tcfg.steps / 20).max(1);
    let trace = train_loop(&mut model, &examples, &tcfg, |r, _| {
        if r.step % every == 0 || r.step + 1 == tcfg.steps {
            eprintln!("step {:>6}  nll {:.4}  kl {:.4}  total {:.4}", r.step, r.nll, r.kl, r.total);
        }
    })?;
    save_checkpoint(&a.out, &model, &vocab)?;
    let trace_path = sibling(&a.out, "loss.csv");
    save_trace_csv(&trace_path, &trace)?;
    eprintln!("wrote {} and {}", a.out.display(), trace_path.display());
    Ok(())
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    let mut cfg: GenerateConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => GenerateConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.nucleus_p {
        cfg.nucleus_p = p;
    }
    if let Some(t) = a.temperature {
        cfg.temperature = t;
    }
    if let Some(m) = a.max_tokens {
        cfg.max_tokens = m;
    }
    if let Some(s) = a.samples {
        cfg.samples_per_prompt = s;
    }
    cfg.greedy |= a.greedy;
    cfg.validate()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let prompts: Vec<_> =
        load_prompts(&a.prompts)?.into_iter().map(|(id, p)| (id, p.encode(&ckpt.vocab))).collect();
    eprintln!("sampling {} x {} stories", prompts.len(), cfg.samples_per_prompt);
    let samples = generate_all(&ckpt.model, &ckpt.vocab, &prompts, &cfg)?;
    save_samples(&a.out, &samples)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn read_samples(path: &Path) -> CliResult<Vec<GeneratedSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CoreError::Input(format!("{} line {}: {e}", path.display(), i + 1)).into())
        })
        .collect()
}

fn is_generation_output(path: &Path) -> CliResult<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("{}");
    Ok(serde_json::from_str::<Value>(first).map(|v| v.get("sample_index").is_some()).unwrap_or(false))
}

pub fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    let cfg = MetricsConfig { sections: a.sections, top_k: a.protagonists };
    let gold = a.gold.as_deref().map(load_corpus).transpose()?;
    let gold_by_id: HashMap<&str, &AnnotatedNarrative> =
        gold.iter().flatten().map(|n| (n.story_id.as_str(), n)).collect();
    let (stories, prompts): (Vec<AnnotatedNarrative>, Vec<EntityPrompt>) = if is_generation_output(&a.stories)? {
        let gold = gold
            .as_ref()
            .ok_or_else(|| CliError::Usage("analyzing generated samples needs --gold".into()))?;
        let annotator = Annotator::from_corpus(gold);
        read_samples(&a.stories)?
            .into_iter()
            .map(|s| {
                let g = gold_by_id
                    .get(s.prompt_id.as_str())
                    .ok_or_else(|| CoreError::Input(format!("no gold story for prompt {}", s.prompt_id)))?;
                let prompt = EntityPrompt::from_narrative(g);
                let id = format!("{}#{}", s.prompt_id, s.sample_index);
                Ok((annotator.annotate(&id, &tokenize_text(&s.text), &prompt), prompt))
            })
            .collect::<CliResult<Vec<_>>>()?
            .into_iter()
            .unzip()
    } else {
        load_corpus(&a.stories)?
            .into_iter()
            .map(|n| {
                let prompt = match &gold {
                    Some(_) => EntityPrompt::from_narrative(gold_by_id.get(n.story_id.as_str()).ok_or_else(|| {
                        CoreError::Input(format!("no gold story with id {}", n.story_id))
                    })?),
                    None => EntityPrompt::from_narrative(&n),
                };
                Ok((n, prompt))
            })
            .collect::<CliResult<Vec<_>>>()?
            .into_iter()
            .unzip()
    };
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let scorer = ckpt.as_ref().map(|c| (&c.model as &dyn mneme_core::metrics::TokenScorer, &c.vocab));
    let report = analyze_corpus(&stories, Some(&prompts), &cfg, scorer)?;
    let mut json = Vec::new();
    report.write_json(&mut json)?;
    write_bytes(&a.out, json)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_bytes(&sibling(&a.out, "csv"), csv)?;
    let mut sec = Vec::new();
    report.write_section_csv(&mut sec)?;
    write_bytes(&sibling(&a.out, "sections.csv"), sec)?;
    eprintln!("analyzed {} stories into {}", report.stories.len(), a.out.display());
    Ok(())
}

pub fn eval_lm(a: EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let cache = a.cache_size.unwrap_or(ckpt.model.config.cache_size);
    let entry = SweepEntry { variant: ckpt.model.variant().name().to_owned(), seed: ckpt.model.config.seed, model: &ckpt.model };
    let (report, _) = run_sweep(&[entry], &ckpt.vocab, &corpus, &[cache], a.sections)?;
    let p = &report.points[0];
    let out = serde_json::json!({
        "variant": p.variant,
        "cache_size": cache,
        "stories": corpus.len(),
        "perplexity": p.nll.exp(),
        "nll": p.nll,
        "nll_entity": p.nll_entity,
        "nll_rest": p.nll_rest,
        "nll_entity_per_section": p.nll_entity_per_section,
    });
    write_text(&a.out, &serde_json::to_string_pretty(&out)?)?;
    let mut csv = String::from("section,nll_entity\n");
    for (s, x) in p.nll_entity_per_section.iter().enumerate() {
        csv.push_str(&format!("{s},{}\n", x.map_or_else(String::new, |v| v.to_string())));
    }
    write_text(&sibling(&a.out, "sections.csv"), &csv)?;
    eprintln!("perplexity {:.4} at cache size {cache}", p.nll.exp());
    Ok(())
}

pub fn degradation(a: DegradationArgs) -> CliResult<()> {
    ensure_dir(&a.out)?;
    let (report, dumps, chart) = if let Some(path) = &a.config {
        let mut plan: ExperimentPlan = read_config(path)?;
        if !a.cache_size.is_empty() {
            plan.cache_sizes = a.cache_size.clone();
        }
        if let Some(s) = a.sections {
            plan.sections = s;
        }
        let (report, dumps, trained) = run_plan(&plan, |line| eprintln!("{line}"))?;
        let (_, _, vocab) = plan.corpora()?;
        for t in &trained {
            let p = a.out.join(format!("{}-seed{}.ckpt", t.variant.name(), t.seed));
            save_checkpoint(&p, &t.model, &vocab)?;
        }
        (report, dumps, plan.chart || a.chart)
    } else {
        if a.checkpoint.is_empty() {
            return Err(CliError::Usage("give --config or at least one --checkpoint".into()));
        }
        let corpus_path = a.corpus.as_deref().ok_or_else(|| CliError::Usage("checkpoint mode needs --corpus".into()))?;
        let corpus = load_corpus(corpus_path)?;
        let ckpts = a.checkpoint.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>, _>>()?;
        let vocab = &ckpts[0].vocab;
        if ckpts.iter().any(|c| c.vocab.words() != vocab.words()) {
            return Err(CoreError::Input("checkpoints use different vocabularies".into()).into());
        }
        let sweep = if a.cache_size.is_empty() { vec![500, 100, 50, 10] } else { a.cache_size.clone() };
        let entries: Vec<SweepEntry<'_>> = ckpts
            .iter()
            .map(|c| SweepEntry { variant: c.model.variant().name().to_owned(), seed: c.model.config.seed, model: &c.model })
            .collect();
        let (report, dumps) = run_sweep(&entries, vocab, &corpus, &sweep, a.sections.unwrap_or(10))?;
        (report, dumps, a.chart)
    };
    let mut buf = Vec::new();
    report.write_rows_csv(&mut buf)?;
    write_bytes(&a.out.join("degradation.csv"), std::mem::take(&mut buf))?;
    report.write_summary_csv(&mut buf)?;
    write_bytes(&a.out.join("summary.csv"), std::mem::take(&mut buf))?;
    report.write_points_csv(&mut buf)?;
    write_bytes(&a.out.join("points.csv"), std::mem::take(&mut buf))?;
    experiment::write_dumps_csv(&mut buf, &dumps)?;
    write_bytes(&a.out.join("token_nll.csv"), std::mem::take(&mut buf))?;
    write_text(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    if chart {
        write_text(&a.out.join("chart.svg"), &report.to_svg())?;
    }
    for s in &report.summary {
        eprintln!(
            "{:<8} cache {:>4}: entity-mention NLL degradation {}",
            s.variant,
            s.cache_size,
            s.mean_degradation.map_or_else(|| "undefined".to_owned(), |d| format!("{:+.2}%", 100.0 * d))
        );
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let mut spec: SyntheticCorpusSpec = match &a.config {
        Some(p) => read_config(p)?,
        None => SyntheticCorpusSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let (stories, truth) = synth::generate(&spec)?;
    save_jsonl(&a.out, &stories)?;
    let truth_path = a.truth.unwrap_or_else(|| sibling(&a.out, "truth.json"));
    write_text(&truth_path, &serde_json::to_string_pretty(&truth)?)?;
    eprintln!("wrote {} stories to {}", stories.len(), a.out.display());
    Ok(())
}
