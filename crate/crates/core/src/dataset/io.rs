//! JSON Lines reading and writing for dataset files.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backends::ImageRef;
use crate::backends::store::write_atomic;
use crate::error::{Error, Result};

use super::{PairSource, QAPair, VQAPair};

/// One line of a dataset file. Image paths are relative to the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub choices: Vec<String>,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub source: PairSource,
}

/// Parses every non-blank line of `path`. Errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::storage(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::schema(Some(i + 1), e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

/// Serializes one JSON value per line, written atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)
}

fn relative_path(path: &Path, base: &Path) -> String {
    let rel = path.strip_prefix(base).unwrap_or(path);
    rel.to_string_lossy().replace('\\', "/")
}

pub fn to_record(pair: &VQAPair, base: &Path) -> VqaRecord {
    VqaRecord {
        id: pair.qa.id.clone(),
        question: pair.qa.question.clone(),
        caption: pair.caption_prefix.clone(),
        choices: pair.qa.choices.clone(),
        answer_index: pair.qa.answer_index,
        image_path: pair.image.as_ref().map(|i| relative_path(&i.path, base)),
        source: pair.qa.source,
    }
}

pub fn from_record(record: VqaRecord, base: &Path, line: usize) -> Result<VQAPair> {
    let image = match &record.image_path {
        Some(p) => {
            let path: PathBuf = base.join(p);
            Some(ImageRef::from_path(&path).map_err(|e| match e {
                Error::MissingImage(m) => Error::MissingImage(format!("line {line}: {m}")),
                other => other,
            })?)
        }
        None => None,
    };
    let qa = QAPair {
        id: record.id,
        question: record.question,
        choices: record.choices,
        answer_index: record.answer_index,
        source: record.source,
    };
    qa.validate().map_err(|e| Error::schema(Some(line), e.to_string()))?;
    Ok(VQAPair {
        qa,
        image,
        caption_prefix: record.caption,
    })
}

pub fn write_vqa_jsonl(path: &Path, pairs: &[VQAPair]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let records: Vec<VqaRecord> = pairs.iter().map(|p| to_record(p, base)).collect();
    write_jsonl(path, &records)
}

/// Reads a dataset file, resolving images relative to its directory.
pub fn read_vqa_jsonl(path: &Path) -> Result<Vec<VQAPair>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::storage(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: VqaRecord = serde_json::from_str(&line)
            .map_err(|e| Error::schema(Some(i + 1), e.to_string()))?;
        out.push(from_record(record, base, i + 1)?);
    }
    Ok(out)
}
