//! Line-delimited JSON manifests and sample files.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::tasks::TaskKind;
use super::Sample;
use crate::error::{CromeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub size: usize,
    pub kind: TaskKind,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for e in &self.entries {
            if e.size == 0 {
                return Err(CromeError::Data(format!("dataset {} has size 0", e.name)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(CromeError::Data(format!("duplicate dataset name {}", e.name)));
            }
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.size).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }

    /// Reads a manifest; relative sample paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let mut entries: Vec<ManifestEntry> = read_jsonl(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Self::new(entries)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| CromeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CromeError::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CromeError::io(path, e))?;
    }
    w.flush().map_err(|e| CromeError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| CromeError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CromeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CromeError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    write_jsonl(path, samples)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = read_jsonl(path)?;
    for s in &samples {
        s.validate()?;
    }
    Ok(samples)
}

/// Drops exact duplicates of (image hash, instruction, target), keeping the
/// first occurrence. Returns the number removed.
pub fn dedup_samples(samples: &mut Vec<Sample>) -> usize {
    let before = samples.len();
    let mut seen = HashSet::new();
    samples.retain(|s| seen.insert((s.image.content_hash(), s.instruction.clone(), s.target.clone())));
    before - samples.len()
}
