//! Run directories: the manifest and header-tagged artifact files.
//!
//! Every JSONL artifact starts with a header line naming the artifact and the
//! config hash of the run that wrote it; CSV artifacts carry the hash in a
//! column. Readers refuse files written under a different configuration.
//! Interface files consumed by other tools (the training corpora) are written
//! bare and tracked by digest in the manifest instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::catalog::IngestReport;
use crate::error::{Error, Result};
use crate::seed;

/// Bumped when any artifact layout changes.
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub artifact: String,
    pub config_hash: String,
    pub schema: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub config_hash: String,
    pub dataset: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub sampled_users: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestReport>,
    pub completed: Vec<String>,
    /// Relative path to sha256 of the file as written.
    pub artifacts: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.completed.iter().any(|s| s == stage)
    }

    pub fn mark_done(&mut self, stage: &str) {
        if !self.is_done(stage) {
            self.completed.push(stage.to_string());
        }
    }
}

/// Write via a temporary sibling and rename, so a crash never leaves a half file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn jsonl_bytes<T: Serialize>(header: Option<&Header>, records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    if let Some(h) = header {
        serde_json::to_writer(&mut buf, h)?;
        buf.push(b'\n');
    }
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn csv_bytes<T: Serialize>(records: &[T], headers_if_empty: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(headers_if_empty).map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Invariant(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invariant(format!("csv: {e}"))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::MalformedRecord {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 2,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// A run directory bound to one config hash.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub config_hash: String,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, config_hash: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            config_hash: config_hash.into(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn header(&self, name: &str) -> Header {
        Header {
            artifact: name.to_string(),
            config_hash: self.config_hash.clone(),
            schema: SCHEMA_VERSION,
        }
    }

    /// Writes and returns the file's digest for the manifest.
    pub fn write_records<T: Serialize>(&self, name: &str, records: &[T]) -> Result<String> {
        self.write_bytes(name, &jsonl_bytes(Some(&self.header(name)), records)?)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<String> {
        write_atomic(&self.path(name), bytes)?;
        Ok(seed::digest(bytes))
    }

    pub fn read_records<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>> {
        let path = self.path(name);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |line: usize, reason: String| Error::MalformedRecord {
            path: path.clone(),
            line,
            reason,
        };
        let first = lines
            .next()
            .ok_or_else(|| bad(1, "missing header".into()))?
            .map_err(|e| Error::io(&path, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
        if header.config_hash != self.config_hash || header.schema != SCHEMA_VERSION {
            return Err(Error::Precondition(format!(
                "{} was written by config {} (schema {}), this run is {} (schema {SCHEMA_VERSION})",
                path.display(),
                header.config_hash,
                header.schema,
                self.config_hash
            )));
        }
        let mut out = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?);
        }
        Ok(out)
    }
}

/// Files present under `dir`, relative, sorted; for comparing run outputs.
pub fn list_files(dir: &Path) -> Result<BTreeSet<PathBuf>> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).expect("under dir").to_path_buf());
            }
        }
    }
    Ok(out)
}
