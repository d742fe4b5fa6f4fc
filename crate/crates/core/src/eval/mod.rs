//! Accuracy accounting, corruption metrics and run records.

mod report;

pub use report::{report, Report};

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::MethodKind;
use crate::scenarios::{DistTag, Regime};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {predictions} predictions, {labels} labels, {tags} tags")]
    Length {
        predictions: usize,
        labels: usize,
        tags: usize,
    },
    #[error("no predictions to score")]
    Empty,
    #[error("error grid is incomplete: {0}")]
    IncompleteGrid(String),
    #[error("error rate {0} outside [0, 1]")]
    ErrorRange(f64),
    #[error("error grids cover different (shift, severity) cells")]
    GridMismatch,
    #[error("baseline errors for shift `{0}` sum to zero")]
    ZeroBaseline(String),
    #[error("malformed record at {path}:{line}: {msg}")]
    Record { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Accuracy in percent for the A group, the B group and the whole batch.
/// A group that never occurs is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub all: f64,
    pub n_a: usize,
    pub n_b: usize,
}

pub fn accuracy(predictions: &[usize], y_hidden: &[usize], tags: &[DistTag]) -> Result<GroupAccuracy, EvalError> {
    if predictions.len() != y_hidden.len() || predictions.len() != tags.len() {
        return Err(EvalError::Length {
            predictions: predictions.len(),
            labels: y_hidden.len(),
            tags: tags.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut hit_a, mut n_a, mut hit_b, mut n_b) = (0usize, 0usize, 0usize, 0usize);
    for ((p, y), t) in predictions.iter().zip(y_hidden).zip(tags) {
        let hit = (p == y) as usize;
        match t {
            DistTag::A => {
                n_a += 1;
                hit_a += hit;
            }
            DistTag::B => {
                n_b += 1;
                hit_b += hit;
            }
        }
    }
    let pct = |h: usize, n: usize| (n > 0).then(|| 100.0 * h as f64 / n as f64);
    Ok(GroupAccuracy {
        a: pct(hit_a, n_a),
        b: pct(hit_b, n_b),
        all: 100.0 * (hit_a + hit_b) as f64 / predictions.len() as f64,
        n_a,
        n_b,
    })
}

/// Top-1 error rates indexed by shift name and severity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorGrid {
    cells: BTreeMap<String, BTreeMap<u8, f64>>,
}

impl ErrorGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, shift: &str, severity: u8, error: f64) -> Result<(), EvalError> {
        if !(0.0..=1.0).contains(&error) {
            return Err(EvalError::ErrorRange(error));
        }
        self.cells.entry(shift.to_string()).or_default().insert(severity, error);
        Ok(())
    }

    pub fn get(&self, shift: &str, severity: u8) -> Option<f64> {
        self.cells.get(shift)?.get(&severity).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn shifts(&self) -> impl Iterator<Item = &str> {
        self.cells.keys().map(String::as_str)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&str, u8, f64)> {
        self.cells
            .iter()
            .flat_map(|(s, row)| row.iter().map(move |(&sev, &e)| (s.as_str(), sev, e)))
    }

    /// Every shift must carry the same severity set.
    fn check_complete(&self) -> Result<(), EvalError> {
        let mut rows = self.cells.iter();
        let Some((first_name, first)) = rows.next() else {
            return Err(EvalError::IncompleteGrid("no cells".into()));
        };
        if first.is_empty() {
            return Err(EvalError::IncompleteGrid(format!("shift `{first_name}` has no severities")));
        }
        for (name, row) in rows {
            if !row.keys().eq(first.keys()) {
                return Err(EvalError::IncompleteGrid(format!(
                    "shift `{name}` covers different severities than `{first_name}`"
                )));
            }
        }
        Ok(())
    }

    fn same_index(&self, other: &ErrorGrid) -> bool {
        self.cells.len() == other.cells.len()
            && self
                .cells
                .iter()
                .zip(&other.cells)
                .all(|((a, ra), (b, rb))| a == b && ra.keys().eq(rb.keys()))
    }
}

/// `100 * (1 - mean error)` over all cells of a complete grid.
pub fn average_accuracy(grid: &ErrorGrid) -> Result<f64, EvalError> {
    grid.check_complete()?;
    let errors: Vec<f64> = grid.cells().map(|(_, _, e)| e).collect();
    Ok(100.0 * (1.0 - errors.iter().sum::<f64>() / errors.len() as f64))
}

/// Mean corruption error of `f` against baseline `f0`:
/// `100 / C * Σ_c (Σ_s E_cs(f) / Σ_s E_cs(f0))`.
pub fn mce(f: &ErrorGrid, f0: &ErrorGrid) -> Result<f64, EvalError> {
    f.check_complete()?;
    f0.check_complete()?;
    if !f.same_index(f0) {
        return Err(EvalError::GridMismatch);
    }
    let mut total = 0.0;
    for ((shift, row), (_, base)) in f.cells.iter().zip(&f0.cells) {
        let denom: f64 = base.values().sum();
        if denom == 0.0 {
            return Err(EvalError::ZeroBaseline(shift.clone()));
        }
        total += row.values().sum::<f64>() / denom;
    }
    Ok(100.0 * total / f.cells.len() as f64)
}

/// Persisted result of one (method, scenario, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub method: MethodKind,
    pub scenario: String,
    pub scenario_fingerprint: String,
    pub regime: Regime,
    /// `kind-severity` labels of distributions A and B.
    pub dist_a: String,
    pub dist_b: Option<String>,
    pub ratio: f64,
    pub seed: u64,
    pub num_batches: usize,
    pub accuracy: GroupAccuracy,
    pub error_grid: ErrorGrid,
    /// Mean batch energy before and after data adaptation, averaged over batches.
    pub data_energy: Option<(f64, f64)>,
    /// First and last CD loss of the prediction model, averaged over batches.
    pub cd_loss: Option<(f64, f64)>,
    pub trace_files: Vec<String>,
    pub wall_time_s: f64,
    /// Effective configuration with defaults resolved.
    pub config: serde_json::Value,
}

impl RunRecord {
    /// The record with timing fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

/// Appends one JSON line per record.
pub fn persist(path: &Path, records: &[RunRecord]) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("records serialise");
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<RunRecord>, EvalError> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Record {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Loads every `*.jsonl` file under `dir` (non-recursive), in file-name order.
pub fn load_dir(dir: &Path) -> Result<Vec<RunRecord>, EvalError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(load(&f)?);
    }
    Ok(out)
}
