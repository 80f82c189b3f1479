//! Forecasting samples: fixed 300-step windows (250 observed input steps,
//! 50 target steps) cut from a simulated series, organised into contiguous
//! train/validation/test source intervals, with CSV + TOML persistence.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::rng::{stream_rng, SPLIT_STREAM};
use crate::run::TimeSeries;
use crate::{Result, SimError};

/// Observed input steps per sample.
pub const INPUT_STEPS: usize = 250;
/// Forecast horizon steps per sample.
pub const TARGET_STEPS: usize = 50;
/// Total window length.
pub const WINDOW_STEPS: usize = INPUT_STEPS + TARGET_STEPS;
/// Sensor channels per step.
pub const CHANNELS: usize = 3;

/// One forecasting sample: a flattened `[step, channel]` row-major input
/// window, its flattened target window, and the source step of its first
/// input row.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub origin_step: usize,
}

impl Sample {
    pub fn new(input: Vec<f64>, target: Vec<f64>, origin_step: usize) -> Result<Self> {
        if input.len() != INPUT_STEPS * CHANNELS {
            return Err(SimError::InvalidState(format!(
                "sample input has {} values, expected {}",
                input.len(),
                INPUT_STEPS * CHANNELS
            )));
        }
        if target.len() != TARGET_STEPS * CHANNELS {
            return Err(SimError::InvalidState(format!(
                "sample target has {} values, expected {}",
                target.len(),
                TARGET_STEPS * CHANNELS
            )));
        }
        Ok(Self { input, target, origin_step })
    }

    pub fn input_cell(&self, step: usize, channel: usize) -> f64 {
        self.input[step * CHANNELS + channel]
    }

    pub fn target_cell(&self, step: usize, channel: usize) -> f64 {
        self.target[step * CHANNELS + channel]
    }

    /// The most recent observed row — the natural seed for autoregressive
    /// decoding and for the persistence baseline.
    pub fn last_input_row(&self) -> [f64; CHANNELS] {
        let base = (INPUT_STEPS - 1) * CHANNELS;
        [self.input[base], self.input[base + 1], self.input[base + 2]]
    }
}

/// Cut the window starting at `origin` out of a series.
pub fn extract_window(series: &TimeSeries, origin: usize) -> Result<Sample> {
    if origin + WINDOW_STEPS > series.len() {
        return Err(SimError::SeriesTooShort {
            interval: "window",
            len: series.len().saturating_sub(origin),
            needed: WINDOW_STEPS,
        });
    }
    let start = origin * CHANNELS;
    let mid = (origin + INPUT_STEPS) * CHANNELS;
    let end = (origin + WINDOW_STEPS) * CHANNELS;
    Sample::new(
        series.values[start..mid].to_vec(),
        series.values[mid..end].to_vec(),
        origin,
    )
}

/// How many samples each split receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// Full benchmark size.
    pub const FULL: SplitCounts = SplitCounts { train: 1000, val: 100, test: 100 };
    /// Reduced size for quick runs on a small machine.
    pub const DESK: SplitCounts = SplitCounts { train: 200, val: 50, test: 50 };

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Samples drawn from one contiguous source interval `[start, end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<Sample>,
    pub interval: (usize, usize),
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn origins(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.origin_step).collect()
    }
}

/// The three splits of one generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &DatasetSplit); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Partition `[0, len)` into contiguous train/val/test intervals with the
/// given proportions.
pub fn split_intervals(len: usize, proportions: (u32, u32, u32)) -> Result<[(usize, usize); 3]> {
    let (p0, p1, p2) = proportions;
    let sum = p0 as u64 + p1 as u64 + p2 as u64;
    if sum == 0 {
        return Err(SimError::InvalidConfig(
            "split proportions must not all be zero".into(),
        ));
    }
    let b1 = (len as u64 * p0 as u64 / sum) as usize;
    let b2 = (len as u64 * (p0 as u64 + p1 as u64) / sum) as usize;
    Ok([(0, b1), (b1, b2), (b2, len)])
}

/// Draw window origins uniformly inside each split's interval (train first,
/// then val, then test, all from one seeded stream) and cut the samples.
/// Every window lies wholly inside its split's interval, so no sample
/// straddles a split boundary.
pub fn make_splits(
    series: &TimeSeries,
    counts: SplitCounts,
    proportions: (u32, u32, u32),
    seed: u64,
) -> Result<Dataset> {
    let intervals = split_intervals(series.len(), proportions)?;
    let names = ["train", "val", "test"];
    let wanted = [counts.train, counts.val, counts.test];
    let mut rng = stream_rng(seed, SPLIT_STREAM);
    let mut splits = Vec::with_capacity(3);
    for i in 0..3 {
        let (start, end) = intervals[i];
        let mut samples = Vec::with_capacity(wanted[i]);
        if wanted[i] > 0 {
            if end - start < WINDOW_STEPS {
                return Err(SimError::SeriesTooShort {
                    interval: names[i],
                    len: end - start,
                    needed: WINDOW_STEPS,
                });
            }
            for _ in 0..wanted[i] {
                let origin = rng.gen_range(start..=end - WINDOW_STEPS);
                samples.push(extract_window(series, origin)?);
            }
        }
        splits.push(DatasetSplit { samples, interval: intervals[i] });
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset { train, val, test })
}

/// Generation record stored beside the CSV files; restoring a dataset from
/// disk needs it (sample origins are not part of the CSV rows).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub counts: SplitCounts,
    pub proportions: (u32, u32, u32),
    pub source_len: usize,
    pub intervals: [(usize, usize); 3],
    pub train_origins: Vec<usize>,
    pub val_origins: Vec<usize>,
    pub test_origins: Vec<usize>,
}

impl DatasetMeta {
    pub fn new(
        scenario: &str,
        seed: u64,
        config_hash: &str,
        counts: SplitCounts,
        proportions: (u32, u32, u32),
        source_len: usize,
        dataset: &Dataset,
    ) -> Self {
        Self {
            schema_version: 1,
            scenario: scenario.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            counts,
            proportions,
            source_len,
            intervals: [
                dataset.train.interval,
                dataset.val.interval,
                dataset.test.interval,
            ],
            train_origins: dataset.train.origins(),
            val_origins: dataset.val.origins(),
            test_origins: dataset.test.origins(),
        }
    }
}

const SPLIT_FILES: [&str; 3] = ["train.csv", "val.csv", "test.csv"];
const CSV_HEADER: &str = "sample_id,role,row,h1,h2,h3";

fn split_to_csv(split: &DatasetSplit) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (id, sample) in split.samples.iter().enumerate() {
        for row in 0..INPUT_STEPS {
            let _ = writeln!(
                out,
                "{id},input,{row},{:e},{:e},{:e}",
                sample.input_cell(row, 0),
                sample.input_cell(row, 1),
                sample.input_cell(row, 2),
            );
        }
        for row in 0..TARGET_STEPS {
            let _ = writeln!(
                out,
                "{id},target,{row},{:e},{:e},{:e}",
                sample.target_cell(row, 0),
                sample.target_cell(row, 1),
                sample.target_cell(row, 2),
            );
        }
    }
    out
}

/// Write `train.csv`, `val.csv`, `test.csv` and `meta.toml` into `dir`
/// (created if absent). Values use the shortest decimal form that parses
/// back to the identical bits.
pub fn export_csv(dir: impl AsRef<Path>, dataset: &Dataset, meta: &DatasetMeta) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for ((_, split), file) in dataset.splits().iter().zip(SPLIT_FILES) {
        fs::write(dir.join(file), split_to_csv(split))?;
    }
    fs::write(dir.join("meta.toml"), toml::to_string_pretty(meta)?)?;
    Ok(())
}

fn malformed(file: &Path, line: usize, msg: impl Into<String>) -> SimError {
    SimError::Malformed {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_cell(file: &Path, line_no: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| malformed(file, line_no, format!("bad number '{field}'")))?;
    if !v.is_finite() {
        return Err(malformed(file, line_no, format!("non-finite value '{field}'")));
    }
    Ok(v)
}

fn parse_split_csv(path: &Path, origins: &[usize], interval: (usize, usize)) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path)
        .map_err(|e| malformed(path, 0, format!("cannot read split file: {e}")))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(malformed(path, 1, format!("bad header '{header}'")));
        }
        None => return Err(malformed(path, 1, "empty file")),
    }
    let mut samples = Vec::with_capacity(origins.len());
    let mut input = Vec::with_capacity(INPUT_STEPS * CHANNELS);
    let mut target = Vec::with_capacity(TARGET_STEPS * CHANNELS);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(malformed(path, line_no, format!("expected 6 fields, got {}", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| malformed(path, line_no, format!("bad sample id '{}'", fields[0])))?;
        if id != samples.len() {
            return Err(malformed(
                path,
                line_no,
                format!("sample id {id} out of order (expected {})", samples.len()),
            ));
        }
        let row: usize = fields[2]
            .parse()
            .map_err(|_| malformed(path, line_no, format!("bad row index '{}'", fields[2])))?;
        let (buf, limit) = match fields[1] {
            "input" => (&mut input, INPUT_STEPS),
            "target" => (&mut target, TARGET_STEPS),
            other => return Err(malformed(path, line_no, format!("bad role '{other}'"))),
        };
        let expect_row = buf.len() / CHANNELS;
        if row != expect_row || row >= limit {
            return Err(malformed(
                path,
                line_no,
                format!("row index {row} out of order (expected {expect_row})"),
            ));
        }
        for field in &fields[3..6] {
            buf.push(parse_cell(path, line_no, field)?);
        }
        if input.len() == INPUT_STEPS * CHANNELS && target.len() == TARGET_STEPS * CHANNELS {
            let origin = *origins.get(samples.len()).ok_or_else(|| {
                malformed(path, line_no, format!("file holds more samples than the {} origins recorded in meta.toml", origins.len()))
            })?;
            samples.push(Sample::new(
                std::mem::take(&mut input),
                std::mem::take(&mut target),
                origin,
            )?);
        }
    }
    if !input.is_empty() || !target.is_empty() {
        return Err(malformed(path, text.lines().count(), "file ends mid-sample"));
    }
    if samples.len() != origins.len() {
        return Err(malformed(
            path,
            text.lines().count(),
            format!("{} samples in file but {} origins in meta.toml", samples.len(), origins.len()),
        ));
    }
    Ok(DatasetSplit { samples, interval })
}

/// Restore a dataset written by [`export_csv`]. The directory must contain
/// `meta.toml`; without it the sample origins cannot be recovered.
pub fn import_csv(dir: impl AsRef<Path>) -> Result<(Dataset, DatasetMeta)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.toml");
    if !meta_path.exists() {
        return Err(malformed(
            &meta_path,
            0,
            "meta.toml not found; a dataset directory needs its generation record",
        ));
    }
    let meta_text = fs::read_to_string(&meta_path)?;
    let meta: DatasetMeta = toml::from_str(&meta_text)
        .map_err(|e| malformed(&meta_path, 0, format!("bad meta.toml: {e}")))?;
    let origin_sets = [&meta.train_origins, &meta.val_origins, &meta.test_origins];
    let mut splits = Vec::with_capacity(3);
    for i in 0..3 {
        splits.push(parse_split_csv(
            &dir.join(SPLIT_FILES[i]),
            origin_sets[i],
            meta.intervals[i],
        )?);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok((Dataset { train, val, test }, meta))
}
