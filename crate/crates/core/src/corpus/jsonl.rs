use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{AnnotatedNarrative, CorpusError, RecordError};
use crate::error::{Error, Result};

/// Parses one narrative per non-blank line and validates each record.
/// Every bad line is reported, not just the first.
pub fn read_jsonl<R: Read>(reader: R) -> Result<Vec<AnnotatedNarrative>> {
    let mut stories = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AnnotatedNarrative>(&line) {
            Ok(story) => match story.validate() {
                Ok(()) => stories.push(story),
                Err(errs) => errors.extend(errs.into_iter().map(|e| RecordError { line: Some(lineno), ..e })),
            },
            Err(e) => errors.push(RecordError {
                line: Some(lineno),
                story_id: None,
                field: "record".into(),
                message: e.to_string(),
            }),
        }
    }
    if !errors.is_empty() {
        let mut lines: Vec<usize> = errors.iter().filter_map(|e| e.line).collect();
        lines.dedup();
        return Err(CorpusError::Malformed { lines, errors }.into());
    }
    Ok(stories)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<AnnotatedNarrative>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(file)
}

/// Canonical form: compact JSON, schema field order, one record per line.
pub fn write_jsonl<W: Write>(mut writer: W, stories: &[AnnotatedNarrative]) -> Result<()> {
    for s in stories {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, stories: &[AnnotatedNarrative]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_jsonl(&mut w, stories)?;
    w.flush().map_err(|e| Error::io(path, e))
}
