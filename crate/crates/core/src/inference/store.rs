use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DecodeMode, RunRecord};
use crate::prompts::PromptVariant;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub model: String,
    pub variant: PromptVariant,
    pub decode: DecodeMode,
    pub post_id: String,
    pub run_index: u32,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate record {0:?}")]
    Duplicate(Box<RunKey>),
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io { path: path.to_owned(), source }
    }
}

/// Append-only line-json store of [`RunRecord`]s with a single writer.
///
/// Opening a store whose last line was cut off mid-write drops that partial
/// line, so an interrupted batch can be resumed in place.
pub struct RunStore {
    path: PathBuf,
    keys: BTreeSet<RunKey>,
    writer: BufWriter<File>,
}

impl RunStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
        }
        let mut keys = BTreeSet::new();
        if path.exists() {
            let (records, valid_len) = read_prefix(path)?;
            for r in records {
                let key = r.key();
                if !keys.insert(key.clone()) {
                    return Err(StoreError::Duplicate(Box::new(key)));
                }
            }
            let file = OpenOptions::new().write(true).open(path).map_err(|e| StoreError::io(path, e))?;
            file.set_len(valid_len).map_err(|e| StoreError::io(path, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| StoreError::io(path, e))?;
        Ok(RunStore { path: path.to_owned(), keys, writer: BufWriter::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &RunKey) -> bool {
        self.keys.contains(key)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<(), StoreError> {
        let key = record.key();
        if self.keys.contains(&key) {
            return Err(StoreError::Duplicate(Box::new(key)));
        }
        let line = serde_json::to_string(record).map_err(|e| StoreError::Malformed { line: 0, message: e.to_string() })?;
        writeln!(self.writer, "{line}").map_err(|e| StoreError::io(&self.path, e))?;
        self.writer.flush().map_err(|e| StoreError::io(&self.path, e))?;
        self.keys.insert(key);
        Ok(())
    }

    /// Reads every complete record of a store file.
    pub fn load(path: &Path) -> Result<Vec<RunRecord>, StoreError> {
        Ok(read_prefix(path)?.0)
    }
}

/// Parses complete lines; a trailing line without newline that fails to
/// parse is treated as an interrupted write. Returns the byte length of the
/// intact prefix.
fn read_prefix(path: &Path) -> Result<(Vec<RunRecord>, u64), StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut valid_len = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| StoreError::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        if buf.trim().is_empty() {
            if complete {
                valid_len += n as u64;
            }
            continue;
        }
        match serde_json::from_str::<RunRecord>(buf.trim_end()) {
            Ok(r) if complete => {
                records.push(r);
                valid_len += n as u64;
            }
            // A parseable but unterminated final line is still a torn write.
            Ok(_) => break,
            Err(_) if !complete => break,
            Err(e) => return Err(StoreError::Malformed { line: line_no, message: e.to_string() }),
        }
    }
    Ok((records, valid_len))
}
