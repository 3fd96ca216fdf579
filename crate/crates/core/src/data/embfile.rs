//! Embedding matrix files.
//!
//! Binary layout: `"HEMB"`, u32 version (1), u32 dim, u64 count, then
//! `count · dim` f32 little-endian values, row-major.
//!
//! Text fallback (`.csv`): a header line starting with `id,dim`, then one
//! `id,dim,v0,...,v{dim-1}` line per row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HEMB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Schema(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.rows()).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }
}

pub fn write_hemb<W: Write>(m: &EmbeddingMatrix, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.dim as u32).to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_hemb<R: Read>(mut r: R) -> Result<EmbeddingMatrix> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)
        .map_err(|e| Error::Schema(format!("truncated embedding header: {e}")))?;
    if &header[..4] != MAGIC {
        return Err(Error::Schema("bad magic, not an embedding matrix".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Schema(format!(
            "unsupported embedding matrix version {version}"
        )));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Schema(format!("unreadable embedding data: {e}")))?;
    if bytes.len() != count * dim * 4 {
        return Err(Error::Schema(format!(
            "embedding matrix declares {count}×{dim} values but holds {} bytes",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(dim, data)
}

pub fn read_csv(text: &str, path: &Path) -> Result<EmbeddingMatrix> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_start().starts_with("id,dim") => {}
        _ => return Err(parse_err(1, "expected header starting with id,dim".into())),
    }
    let mut dim = None;
    let mut data = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let _id = fields.next();
        let d: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(i + 1, "missing or invalid dim".into()))?;
        let values = fields
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(i + 1, format!("bad value: {e}")))?;
        if values.len() != d {
            return Err(parse_err(
                i + 1,
                format!("row declares dim {d} but has {} values", values.len()),
            ));
        }
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Schema(format!(
                    "{}: row dimension {d} differs from {prev}",
                    path.display()
                )))
            }
            _ => {}
        }
        data.extend(values);
    }
    let dim = dim.ok_or_else(|| Error::Schema(format!("{}: no rows", path.display())))?;
    EmbeddingMatrix::new(dim, data)
}

/// Reads a binary matrix, or the text fallback for `.csv` paths.
pub fn read(path: &Path) -> Result<EmbeddingMatrix> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return read_csv(&text, path);
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_hemb(BufReader::new(f))
}

pub fn write(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_hemb(m, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}
