//! Utterance lists on disk: a CSV with header `path,speaker,transcript,split`.
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_wav, AudioClip, AudioError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}, record {record}: {message}")]
    Malformed { path: PathBuf, record: usize, message: String },
    #[error("manifest {path} lacks column {column}")]
    MissingColumn { path: PathBuf, column: &'static str },
    #[error("manifest {0} lists no utterances")]
    Empty(PathBuf),
    #[error("utterance id {0} appears more than once")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A labelled utterance held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub clip: AudioClip,
    pub speaker: String,
    pub transcript: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub speaker: String,
    pub transcript: String,
    pub split: Split,
}

impl ManifestRow {
    /// Utterance id: the file name without extension.
    pub fn id(&self) -> String {
        Path::new(&self.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub const COLUMNS: [&str; 4] = ["path", "speaker", "transcript", "split"];

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let io = |source| ManifestError::Io { path: path.to_path_buf(), source };
        let text = std::fs::read_to_string(path).map_err(io)?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let malformed = |record: usize, e: csv::Error| ManifestError::Malformed {
            path: path.to_path_buf(),
            record,
            message: e.to_string(),
        };
        let headers = reader.headers().map_err(|e| malformed(0, e))?.clone();
        if let Some(column) = COLUMNS.iter().find(|c| !headers.iter().any(|h| h == **c)) {
            return Err(ManifestError::MissingColumn { path: path.to_path_buf(), column });
        }
        let rows = reader
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| malformed(i + 1, e)))
            .collect::<Result<Vec<ManifestRow>, _>>()?;
        if rows.is_empty() {
            return Err(ManifestError::Empty(path.to_path_buf()));
        }
        let mut seen = BTreeSet::new();
        for r in &rows {
            let id = r.id();
            if !seen.insert(id.clone()) {
                return Err(ManifestError::DuplicateId(id));
            }
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, rows })
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.path)
    }

    pub fn load_utterance(&self, row: &ManifestRow) -> Result<Utterance, AudioError> {
        let clip = load_wav(self.resolve(row))?.with_id(row.id());
        Ok(Utterance {
            clip,
            speaker: row.speaker.clone(),
            transcript: row.transcript.clone(),
            split: row.split,
        })
    }

    /// Loads every row in `split` (all rows when `None`), failing on the
    /// first unreadable file.
    pub fn load_split(&self, split: Option<Split>) -> Result<Vec<Utterance>, AudioError> {
        self.rows
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| self.load_utterance(r))
            .collect()
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.speaker.as_str()).collect()
    }
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}
