//! Config-driven pipeline: data generation, source training and sweeps.

mod config;
mod sweep;
mod train;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub use config::{ConfigError, ExperimentConfig, TrainConfig};
pub use sweep::{resolve_scenario, run_cell, run_id, run_sweep, scenario_fingerprint, write_record, CellResult};
pub use train::{clean_accuracy, train_source, TrainedSource};

use crate::adapt::AdaptError;
use crate::baselines::MethodError;
use crate::batch::Batch;
use crate::diffnet::NetError;
use crate::eval::EvalError;
use crate::sampler::ChainError;
use crate::scenarios::{compose_batches, gen_source, write_csv, write_dataset, LabeledBatch, ScenarioError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("source training failed: {0}")]
    Training(String),
    #[error("run `{run_id}` batch {batch}: {source}")]
    Method {
        run_id: String,
        batch: usize,
        #[source]
        source: MethodError,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// True when model adaptation gave up after its retry.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            ExperimentError::Method {
                source: MethodError::Adapt(AdaptError::Diverged { .. }),
                ..
            }
        )
    }
}

/// Clean source data plus a trained classifier.
#[derive(Debug, Clone)]
pub struct SourceWorld {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub trained: TrainedSource,
}

pub fn build_source(cfg: &ExperimentConfig) -> Result<SourceWorld, ExperimentError> {
    let (train, test) = gen_source(&cfg.source)?;
    let trained = train_source(&cfg.net, &train, &cfg.training)?;
    Ok(SourceWorld { train, test, trained })
}

fn stack(parts: &[LabeledBatch]) -> LabeledBatch {
    let xs: Vec<&Batch> = parts.iter().map(|p| &p.x).collect();
    LabeledBatch {
        x: Batch::vstack(&xs).expect("same width"),
        y_hidden: parts.iter().flat_map(|p| p.y_hidden.iter().copied()).collect(),
        tags: parts.iter().flat_map(|p| p.tags.iter().copied()).collect(),
    }
}

fn write_pair(dir: &Path, stem: &str, data: &LabeledBatch, k: usize) -> Result<Vec<PathBuf>, ExperimentError> {
    let bin = dir.join(format!("{stem}.bin"));
    let csv = dir.join(format!("{stem}.csv"));
    write_dataset(&bin, data, k)?;
    write_csv(data, BufWriter::new(fs::File::create(&csv)?))?;
    Ok(vec![bin, csv])
}

/// Writes the clean train/test sets and, for every scenario and seed, the
/// composed test stream (batches concatenated in order). Returns the paths.
pub fn generate_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(out_dir)?;
    let k = cfg.source.num_classes;
    let (train, test) = gen_source(&cfg.source)?;
    let mut paths = write_pair(out_dir, "source_train", &train, k)?;
    paths.extend(write_pair(out_dir, "source_test", &test, k)?);
    for s in &cfg.scenarios {
        for &seed in &cfg.seeds {
            let batches = compose_batches(&resolve_scenario(s, seed), &test)?;
            paths.extend(write_pair(out_dir, &format!("{}_s{seed}", s.name), &stack(&batches), k)?);
        }
    }
    Ok(paths)
}
