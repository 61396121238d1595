use std::fs;
use std::path::{Path, PathBuf};

use mneme_core::corpus::{load_jsonl, AnnotatedNarrative, EntityPrompt};
use mneme_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Reads a JSON config; unreadable or malformed files are configuration
/// errors.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())).into())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CoreError::io(path, e).into())
}

pub fn write_bytes(path: &Path, bytes: Vec<u8>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e).into())
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CoreError::io(path, e).into())
}

/// `report.json` -> `report.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn load_corpus(path: &Path) -> CliResult<Vec<AnnotatedNarrative>> {
    let corpus = load_jsonl(path)?;
    if corpus.is_empty() {
        return Err(CoreError::Input(format!("{} holds no stories", path.display())).into());
    }
    Ok(corpus)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Surface {
    Text(String),
    Tokens(Vec<String>),
}

#[derive(Deserialize)]
struct PromptRecord {
    prompt_id: String,
    entities: Vec<Surface>,
}

/// Prompts from either annotated stories (their own first mentions) or
/// explicit `{prompt_id, entities}` records.
pub fn load_prompts(path: &Path) -> CliResult<Vec<(String, EntityPrompt)>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| CoreError::Input(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if value.get("tokens").is_some() {
            let corpus = mneme_core::corpus::read_jsonl(line.as_bytes()).map_err(|e| {
                CoreError::Input(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            let n = &corpus[0];
            out.push((n.story_id.clone(), EntityPrompt::from_narrative(n)));
        } else {
            let r: PromptRecord = serde_json::from_value(value)
                .map_err(|e| CoreError::Input(format!("{} line {}: {e}", path.display(), i + 1)))?;
            let entities = r
                .entities
                .into_iter()
                .map(|s| match s {
                    Surface::Text(t) => t.split_whitespace().map(str::to_owned).collect(),
                    Surface::Tokens(t) => t,
                })
                .collect();
            out.push((r.prompt_id, EntityPrompt { entities }));
        }
    }
    if out.is_empty() {
        return Err(CoreError::Input(format!("{} holds no prompts", path.display())).into());
    }
    Ok(out)
}
