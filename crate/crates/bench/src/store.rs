//! The append-only results store: one JSON record per line, keyed by the
//! config hash that identifies the exact recipe behind each number.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use threetank_models::ArchKind;
use threetank_sim::ScenarioKind;

use crate::{BenchError, Result};

/// Bumped whenever the record layout changes incompatibly.
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// Which stage of the pipeline a measurement belongs to: a fully trained
/// model, the pre-fine-tuning baseline, or the post-fine-tuning model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Trained,
    Epoch0,
    Epoch50,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Trained => "trained",
            Phase::Epoch0 => "epoch0",
            Phase::Epoch50 => "epoch50",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Training-data augmentation applied during fine-tuning, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Noise,
    Warp,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [Augmentation::None, Augmentation::Noise, Augmentation::Warp];

    pub fn name(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Noise => "noise",
            Augmentation::Warp => "warp",
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Augmentation {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Augmentation::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                BenchError::Invalid(format!("unknown augmentation '{s}' (expected none, noise, or warp)"))
            })
    }
}

/// One measured cell: a model, the scenario it was tested on, the pipeline
/// stage, and the test MSE in original units, plus everything needed to
/// reproduce the number (seed and config hash).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalResult {
    pub schema_version: u32,
    pub model: ArchKind,
    pub scenario: ScenarioKind,
    pub augmentation: Augmentation,
    pub phase: Phase,
    pub test_mse: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalResult {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RESULTS_SCHEMA_VERSION {
            return Err(BenchError::Invalid(format!(
                "result schema version {} (this build reads {})",
                self.schema_version, RESULTS_SCHEMA_VERSION
            )));
        }
        if !self.test_mse.is_finite() || self.test_mse < 0.0 {
            return Err(BenchError::Invalid(format!(
                "test_mse must be finite and >= 0, got {}",
                self.test_mse
            )));
        }
        if self.n_samples == 0 {
            return Err(BenchError::Invalid("result covers zero samples".into()));
        }
        if self.config_hash.is_empty() {
            return Err(BenchError::Invalid("result has an empty config hash".into()));
        }
        Ok(())
    }
}

/// Line-delimited JSON records on disk, indexed by config hash in memory.
/// Appends go straight to disk; existing lines are never rewritten. When a
/// hash appears more than once the latest line wins (a forced rerun
/// supersedes without destroying history).
#[derive(Debug)]
pub struct ResultsStore {
    path: PathBuf,
    records: Vec<EvalResult>,
    index: HashMap<String, usize>,
}

impl ResultsStore {
    /// Open (or lazily create) the store at `path`. A missing file is an
    /// empty store; the file itself is created on first append.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut store = ResultsStore { path: path.clone(), records: Vec::new(), index: HashMap::new() };
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: EvalResult = serde_json::from_str(line).map_err(|e| BenchError::Store {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", lineno + 1),
                })?;
                record.validate().map_err(|e| BenchError::Store {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", lineno + 1),
                })?;
                store.index.insert(record.config_hash.clone(), store.records.len());
                store.records.push(record);
            }
        }
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All records in file order (including superseded duplicates).
    pub fn records(&self) -> &[EvalResult] {
        &self.records
    }

    /// The latest record with this config hash.
    pub fn get(&self, config_hash: &str) -> Option<&EvalResult> {
        self.index.get(config_hash).map(|&i| &self.records[i])
    }

    pub fn contains(&self, config_hash: &str) -> bool {
        self.index.contains_key(config_hash)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Validate and append one record to the file and the in-memory index.
    pub fn append(&mut self, record: EvalResult) -> Result<()> {
        record.validate()?;
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.write_all(line.as_bytes())?;
        self.index.insert(record.config_hash.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use threetank_models::ArchKind;

    fn record(hash: &str, mse: f64) -> EvalResult {
        EvalResult {
            schema_version: RESULTS_SCHEMA_VERSION,
            model: ArchKind::Mlp,
            scenario: ScenarioKind::Standard,
            augmentation: Augmentation::None,
            phase: Phase::Trained,
            test_mse: mse,
            n_samples: 50,
            seed: 1,
            config_hash: hash.to_string(),
        }
    }

    #[test]
    fn roundtrips_through_the_file_and_indexes_by_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        let mut store = ResultsStore::open(&path).unwrap();
        assert!(store.is_empty());
        store.append(record("aaa", 0.5)).unwrap();
        store.append(record("bbb", 0.25)).unwrap();

        let reopened = ResultsStore::open(&path).unwrap();
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.get("aaa").unwrap().test_mse, 0.5);
        assert_eq!(reopened.get("bbb").unwrap().test_mse, 0.25);
        assert!(!reopened.contains("ccc"));
    }

    #[test]
    fn appends_preserve_existing_lines_and_later_duplicates_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        let mut store = ResultsStore::open(&path).unwrap();
        store.append(record("aaa", 0.5)).unwrap();
        let first_len = std::fs::read_to_string(&path).unwrap().len();

        let mut second = ResultsStore::open(&path).unwrap();
        second.append(record("aaa", 0.125)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // The original line is still there, byte for byte.
        assert_eq!(&text[..first_len], &std::fs::read_to_string(&path).unwrap()[..first_len]);
        assert_eq!(text.lines().count(), 2);
        // The newer record shadows the older one.
        assert_eq!(second.get("aaa").unwrap().test_mse, 0.125);
        assert_eq!(ResultsStore::open(&path).unwrap().get("aaa").unwrap().test_mse, 0.125);
    }

    #[test]
    fn rejects_malformed_lines_and_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        let err = ResultsStore::open(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        let mut store = ResultsStore::open(dir.path().join("fresh.jsonl")).unwrap();
        let mut bad = record("aaa", f64::NAN);
        assert!(store.append(bad.clone()).is_err());
        bad.test_mse = -1.0;
        assert!(store.append(bad).is_err());
        assert!(store.is_empty());
    }

    #[test]
    fn serialized_lines_are_stable_and_roundtrip_exactly() {
        let rec = record("deadbeef", 0.1 + 0.2);
        let line = serde_json::to_string(&rec).unwrap();
        let back: EvalResult = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.test_mse.to_bits(), rec.test_mse.to_bits());
        // Field order is declaration order, so files are byte-stable.
        assert!(line.starts_with("{\"schema_version\":1,\"model\":\"mlp\",\"scenario\":\"standard\""), "{line}");
    }
}
