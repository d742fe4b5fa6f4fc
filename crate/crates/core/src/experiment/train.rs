//! Supervised training of the source classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::ExperimentError;
use crate::diffnet::{init_net, recompute_norm_stats, value_and_grad_params, LossHead, NetSpec, NormMode, ParamMask, ParamNet, Sgd};
use crate::ebm::EnergyModel;
use crate::scenarios::LabeledBatch;
use crate::seeds::mix_seed;

#[derive(Debug, Clone)]
pub struct TrainedSource {
    pub net: ParamNet,
    pub loss_trace: Vec<f64>,
}

/// Mini-batch cross-entropy descent for `cfg.steps` steps. Norm layers use
/// batch statistics while training; afterwards their running statistics are
/// set from the whole training set. Zero steps returns the initialisation.
pub fn train_source(spec: &NetSpec, train: &LabeledBatch, cfg: &TrainConfig) -> Result<TrainedSource, ExperimentError> {
    let mut net = init_net(spec, cfg.seed)?;
    if cfg.steps == 0 {
        return Ok(TrainedSource {
            net,
            loss_trace: Vec::new(),
        });
    }
    if train.is_empty() {
        return Err(ExperimentError::Training("empty training set".into()));
    }
    let mode = if spec.use_norm_layers {
        NormMode::TrainBatchStats
    } else {
        NormMode::EvalRunningStats
    };
    let bs = cfg.batch_size.min(train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7A));
    let mut opt = Sgd::new(cfg.momentum);
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = rand::seq::index::sample(&mut rng, train.len(), bs).into_vec();
        let batch = train.select(&idx);
        let (loss, g) = value_and_grad_params(
            &net,
            &batch.x,
            LossHead::CrossEntropy {
                labels: &batch.y_hidden,
            },
            mode,
        )?;
        if !loss.is_finite() {
            return Err(ExperimentError::Training(format!("non-finite loss at step {step}")));
        }
        loss_trace.push(loss);
        net = opt.step(&net, &g, cfg.rate, ParamMask::All)?;
    }
    if spec.use_norm_layers && train.len() >= 2 {
        net = recompute_norm_stats(&net, &train.x)?;
    }
    Ok(TrainedSource { net, loss_trace })
}

/// Percentage of rows the net classifies correctly (eval-mode norm).
pub fn clean_accuracy(net: &ParamNet, data: &LabeledBatch) -> Result<Option<f64>, ExperimentError> {
    if data.is_empty() {
        return Ok(None);
    }
    let labels = EnergyModel::new(net).labels(&data.x)?;
    let hits = labels.iter().zip(&data.y_hidden).filter(|(a, b)| a == b).count();
    Ok(Some(100.0 * hits as f64 / data.len() as f64))
}
