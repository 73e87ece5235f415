//! Line-oriented JSON persistence: media manifests, generic JSONL
//! read/write helpers and the append-only run record store.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::model::{MediaRef, RunRecord};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {0} is not a valid media entry: {1}")]
    MalformedLine(usize, String),
    #[error("duplicate media id `{0}`")]
    DuplicateId(String),
    #[error("manifest line {line}: missing field `{name}`")]
    MissingField { line: usize, name: String },
    #[error("manifest I/O: {0}")]
    Io(#[from] std::io::Error),
}

const MANIFEST_REQUIRED: [&str; 4] = ["id", "uri", "modalities", "duration_s"];

/// Loads a JSONL media manifest. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_media_manifest(path: impl AsRef<Path>) -> Result<Vec<MediaRef>, ManifestError> {
    let reader = BufReader::new(File::open(path)?);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| ManifestError::MalformedLine(line_no, e.to_string()))?;
        let Some(obj) = value.as_object() else {
            return Err(ManifestError::MalformedLine(line_no, "not a JSON object".into()));
        };
        if let Some(name) = MANIFEST_REQUIRED.iter().find(|k| !obj.contains_key(**k)) {
            return Err(ManifestError::MissingField { line: line_no, name: name.to_string() });
        }
        let media: MediaRef =
            serde_json::from_value(value).map_err(|e| ManifestError::MalformedLine(line_no, e.to_string()))?;
        if media.modality_set.is_empty() {
            return Err(ManifestError::MalformedLine(line_no, "modalities must be non-empty".into()));
        }
        if !(media.duration_s >= 0.0) {
            return Err(ManifestError::MalformedLine(line_no, "duration_s must be >= 0".into()));
        }
        if !seen.insert(media.id.clone()) {
            return Err(ManifestError::DuplicateId(media.id));
        }
        out.push(media);
    }
    Ok(out)
}

pub fn write_media_manifest(path: impl AsRef<Path>, media: &[MediaRef]) -> std::io::Result<()> {
    write_jsonl(path, media)
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Reads every non-blank line of a JSONL file as `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let path = path.as_ref();
    let io = |source| JsonlError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes `items` as LF-terminated JSON lines, replacing the file.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run id `{0}` already present in store")]
    DuplicateRunId(String),
    #[error("record store I/O: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("record store line {line} is corrupt: {message}")]
    Corrupt { line: usize, message: String },
}

/// Append-only JSONL store of [`RunRecord`]s.
///
/// Appends are serialized through an internal lock and flushed to disk
/// before returning. Re-opening an existing file restores the set of known
/// run ids, which is what lets an interrupted sweep resume.
pub struct RecordStore {
    path: PathBuf,
    inner: Mutex<StoreInner>,
}

struct StoreInner {
    file: File,
    ids: HashSet<String>,
}

impl RecordStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let mut ids = HashSet::new();
        if path.exists() {
            for rec in Self::read_path(&path)? {
                ids.insert(rec.run_id);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, inner: Mutex::new(StoreInner { file, ids }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, rec: &RunRecord) -> Result<(), StoreError> {
        let mut inner = self.inner.lock().expect("record store lock poisoned");
        if inner.ids.contains(&rec.run_id) {
            return Err(StoreError::DuplicateRunId(rec.run_id.clone()));
        }
        let mut line = serde_json::to_vec(rec).map_err(|e| StoreError::IoFailure(e.into()))?;
        line.push(b'\n');
        inner.file.write_all(&line)?;
        inner.file.flush()?;
        inner.file.sync_data()?;
        inner.ids.insert(rec.run_id.clone());
        Ok(())
    }

    pub fn contains(&self, run_id: &str) -> bool {
        self.inner.lock().expect("record store lock poisoned").ids.contains(run_id)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("record store lock poisoned").ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read_all(&self) -> Result<Vec<RunRecord>, StoreError> {
        let _guard = self.inner.lock().expect("record store lock poisoned");
        Self::read_path(&self.path)
    }

    fn read_path(path: &Path) -> Result<Vec<RunRecord>, StoreError> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| StoreError::Corrupt { line: idx + 1, message: e.to_string() })?;
            out.push(rec);
        }
        Ok(out)
    }
}
