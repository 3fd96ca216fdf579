//! JSON-lines manifests, one record per line.
//!
//! A record carries its embedding inline (`"embedding": [...]`) or points
//! into an embedding matrix file (`"embedding_ref": {"file": ..., "row": ...}`),
//! resolved relative to the manifest's directory.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::embfile::{self, EmbeddingMatrix};
use super::{Dataset, EmbeddingRecord, SetType, Split};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRef {
    pub file: String,
    pub row: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_ref: Option<EmbeddingRef>,
    sr_hz: f64,
    bps: f64,
    q: u32,
    codec_name: String,
    split: Split,
    set_type: SetType,
}

/// How [`write_manifest`] stores embeddings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingStorage {
    Inline,
    /// A binary matrix file with this name, next to the manifest.
    Matrix(String),
}

fn parse_line(text: &str, lineno: usize, path: &Path) -> Result<Line> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        message,
    };
    let line: Line = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
    match (&line.embedding, &line.embedding_ref) {
        (Some(_), None) | (None, Some(_)) => Ok(line),
        _ => Err(err(format!(
            "record {} needs exactly one of embedding or embedding_ref",
            line.id
        ))),
    }
}

/// Loads and validates a manifest. Lines are parsed in parallel; record
/// order is file order.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    let parsed = par::map_collect(&lines, |&(n, l)| parse_line(l, n, path));

    let base = path.parent().unwrap_or(Path::new("."));
    let mut matrices: HashMap<PathBuf, EmbeddingMatrix> = HashMap::new();
    let mut records = Vec::with_capacity(parsed.len());
    for line in parsed {
        let line = line?;
        let embedding = match (line.embedding, line.embedding_ref) {
            (Some(e), _) => e,
            (None, Some(r)) => {
                let file = base.join(&r.file);
                if !matrices.contains_key(&file) {
                    let m = embfile::read(&file)?;
                    matrices.insert(file.clone(), m);
                }
                let m = &matrices[&file];
                m.row(r.row)
                    .ok_or_else(|| {
                        Error::Record(format!(
                            "record {}: row {} out of range for {} ({} rows)",
                            line.id,
                            r.row,
                            r.file,
                            m.rows()
                        ))
                    })?
                    .to_vec()
            }
            (None, None) => unreachable!("checked while parsing"),
        };
        records.push(EmbeddingRecord {
            id: line.id,
            embedding,
            sr_hz: line.sr_hz,
            bps: line.bps,
            q: line.q,
            codec_name: line.codec_name,
            split: line.split,
            set_type: line.set_type,
        });
    }
    Dataset::new(records)
}

/// Writes `dataset` as a manifest at `path`, plus a matrix file when asked.
pub fn write_manifest(dataset: &Dataset, path: &Path, storage: &EmbeddingStorage) -> Result<()> {
    if let EmbeddingStorage::Matrix(name) = storage {
        let dim = dataset.dim().unwrap_or(1);
        let data = dataset
            .records()
            .iter()
            .flat_map(|r| r.embedding.iter().copied())
            .collect();
        let m = EmbeddingMatrix::new(dim, data)?;
        let base = path.parent().unwrap_or(Path::new("."));
        embfile::write(&m, &base.join(name))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (i, r) in dataset.records().iter().enumerate() {
        let (embedding, embedding_ref) = match storage {
            EmbeddingStorage::Inline => (Some(r.embedding.clone()), None),
            EmbeddingStorage::Matrix(name) => (
                None,
                Some(EmbeddingRef {
                    file: name.clone(),
                    row: i,
                }),
            ),
        };
        let line = Line {
            id: r.id.clone(),
            embedding,
            embedding_ref,
            sr_hz: r.sr_hz,
            bps: r.bps,
            q: r.q,
            codec_name: r.codec_name.clone(),
            split: r.split,
            set_type: r.set_type,
        };
        let text = serde_json::to_string(&line).expect("records serialize");
        writeln!(w, "{text}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
