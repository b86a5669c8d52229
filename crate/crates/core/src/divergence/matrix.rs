use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::DivergenceError;
use crate::prompts::PromptVariant;

const MAGIC: &[u8; 4] = b"PEMB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub post_id: String,
    pub model: String,
    pub variant: PromptVariant,
}

impl RowKey {
    pub fn new(post_id: impl Into<String>, model: impl Into<String>, variant: PromptVariant) -> Self {
        RowKey { post_id: post_id.into(), model: model.into(), variant }
    }
}

/// Row-major matrix of response vectors with a per-row (post, model, variant) index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    width: usize,
    data: Vec<f64>,
    index: Vec<RowKey>,
}

impl EmbeddingMatrix {
    pub fn from_rows(width: usize, rows: Vec<(RowKey, Vec<f64>)>) -> Result<Self, DivergenceError> {
        let mut data = Vec::with_capacity(rows.len() * width);
        let mut index = Vec::with_capacity(rows.len());
        for (i, (key, row)) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(DivergenceError::RaggedRow { row: i, expected: width, got: row.len() });
            }
            data.extend_from_slice(&row);
            index.push(key);
        }
        EmbeddingMatrix::from_parts(width, data, index)
    }

    pub fn from_parts(width: usize, data: Vec<f64>, index: Vec<RowKey>) -> Result<Self, DivergenceError> {
        if data.len() != width * index.len() {
            return Err(DivergenceError::Format(format!(
                "{} values do not fill {} rows of width {width}",
                data.len(),
                index.len()
            )));
        }
        if width > 0 {
            if let Some(bad) = data.chunks(width).position(|r| r.iter().any(|x| !x.is_finite())) {
                return Err(DivergenceError::NonFinite { row: bad });
            }
        }
        Ok(EmbeddingMatrix { width, data, index })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &[RowKey] {
        &self.index
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&RowKey, &[f64])> {
        self.index.iter().zip(self.data.chunks(self.width.max(1)))
    }

    /// Distinct model names in first-appearance order.
    pub fn models(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.index.iter().filter(|k| seen.insert(k.model.clone())).map(|k| k.model.clone()).collect()
    }

    pub fn variants(&self) -> Vec<PromptVariant> {
        let set: BTreeSet<PromptVariant> = self.index.iter().map(|k| k.variant).collect();
        set.into_iter().collect()
    }

    /// Rows whose key satisfies `keep`, in original order.
    pub fn select(&self, mut keep: impl FnMut(&RowKey) -> bool) -> EmbeddingMatrix {
        let mut data = Vec::new();
        let mut index = Vec::new();
        for (key, row) in self.rows() {
            if keep(key) {
                data.extend_from_slice(row);
                index.push(key.clone());
            }
        }
        EmbeddingMatrix { width: self.width, data, index }
    }

    pub fn for_variant(&self, variant: PromptVariant) -> EmbeddingMatrix {
        self.select(|k| k.variant == variant)
    }

    /// Post id → row slice for one model; each post must appear once.
    pub fn model_rows(&self, model: &str) -> Result<Vec<(&str, &[f64])>, DivergenceError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (key, row) in self.rows().filter(|(k, _)| k.model == model) {
            if !seen.insert(key.post_id.as_str()) {
                return Err(DivergenceError::DuplicateRow { model: model.into(), post_id: key.post_id.clone() });
            }
            out.push((key.post_id.as_str(), row));
        }
        Ok(out)
    }

    /// Keeps only posts that have a row for every model present, so analyses
    /// drop missing embeddings symmetrically.
    pub fn retain_complete_posts(&self) -> EmbeddingMatrix {
        let models = self.models();
        let mut per_post: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        for k in &self.index {
            per_post.entry(&k.post_id).or_default().insert(&k.model);
        }
        let complete: BTreeSet<String> = per_post
            .into_iter()
            .filter(|(_, ms)| ms.len() == models.len())
            .map(|(p, _)| p.to_owned())
            .collect();
        self.select(|k| complete.contains(&k.post_id))
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.width, &self.data)
    }

    pub fn with_data(&self, width: usize, data: Vec<f64>) -> Result<EmbeddingMatrix, DivergenceError> {
        EmbeddingMatrix::from_parts(width, data, self.index.clone())
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".index.jsonl");
        PathBuf::from(s)
    }

    /// Writes the little-endian binary matrix and its line-json index sidecar.
    pub fn write(&self, path: &Path) -> Result<(), DivergenceError> {
        let io = |e| DivergenceError::io(path, e);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| DivergenceError::io(dir, e))?;
        }
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.width as u64).to_le_bytes()).map_err(io)?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let side = Self::sidecar_path(path);
        let io = |e| DivergenceError::io(&side, e);
        let mut w = BufWriter::new(File::create(&side).map_err(io)?);
        for (row, key) in self.index.iter().enumerate() {
            let line = IndexLine {
                row,
                post_id: key.post_id.clone(),
                model: key.model.clone(),
                variant: key.variant,
                width: self.width,
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("index line serializes")).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<EmbeddingMatrix, DivergenceError> {
        let io = |e| DivergenceError::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(DivergenceError::Format(format!("{}: bad magic", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(DivergenceError::Format(format!("{}: unsupported version", path.display())));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let rows = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let width = u64::from_le_bytes(b8) as usize;
        let mut data = Vec::with_capacity(rows * width);
        for _ in 0..rows * width {
            r.read_exact(&mut b8).map_err(io)?;
            data.push(f64::from_le_bytes(b8));
        }

        let side = Self::sidecar_path(path);
        let reader = BufReader::new(File::open(&side).map_err(|e| DivergenceError::io(&side, e))?);
        let mut index = Vec::with_capacity(rows);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| DivergenceError::io(&side, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: IndexLine = serde_json::from_str(&line)
                .map_err(|e| DivergenceError::Format(format!("{}:{}: {e}", side.display(), i + 1)))?;
            if parsed.width != width || parsed.row != index.len() {
                return Err(DivergenceError::Format(format!("{}:{}: row/width mismatch", side.display(), i + 1)));
            }
            index.push(RowKey { post_id: parsed.post_id, model: parsed.model, variant: parsed.variant });
        }
        if index.len() != rows {
            return Err(DivergenceError::Format(format!(
                "{} lists {} rows, matrix has {rows}",
                side.display(),
                index.len()
            )));
        }
        EmbeddingMatrix::from_parts(width, data, index)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    row: usize,
    post_id: String,
    model: String,
    variant: PromptVariant,
    width: usize,
}
