//! A classifier read as an energy-based model over its inputs.
//!
//! For logits `f(x)` the joint energy of a sample and a class is `-f(x)[y]`
//! and the marginal energy is `-logsumexp(f(x))`, so
//! `p(x) ∝ exp(-E(x))` and `p(y|x) = exp(E(x) - E(x, y))` is the softmax.
//! The normaliser over `x` is never computed; only unnormalised
//! log-densities are exposed.

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::diffnet::{grad_input, NetError, NormMode, ParamNet};
use crate::numerics::{argmax, logsumexp, softmax};

/// Anything Langevin chains can descend: per-row energies plus their input
/// gradients.
pub trait EnergySurface {
    fn input_dim(&self) -> usize;

    /// Per-row energies and `dE/dx` for every row.
    fn energy_and_grad(&self, x: &Batch) -> Result<(Vec<f64>, Batch), NetError>;

    fn energies(&self, x: &Batch) -> Result<Vec<f64>, NetError> {
        self.energy_and_grad(x).map(|(e, _)| e)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EnergyModel<'a> {
    net: &'a ParamNet,
    mode: NormMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEnergy {
    pub energies: Vec<f64>,
    pub mean: f64,
}

pub fn energy_from_logits(z: &[f64]) -> f64 {
    -logsumexp(z)
}

impl<'a> EnergyModel<'a> {
    /// Energy view using running norm statistics.
    pub fn new(net: &'a ParamNet) -> Self {
        Self {
            net,
            mode: NormMode::EvalRunningStats,
        }
    }

    pub fn with_mode(net: &'a ParamNet, mode: NormMode) -> Self {
        Self { net, mode }
    }

    pub fn net(&self) -> &'a ParamNet {
        self.net
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    fn logits_one(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.net.forward(&Batch::single(x), self.mode)?.into_vec())
    }

    pub fn energy(&self, x: &[f64]) -> Result<f64, NetError> {
        Ok(energy_from_logits(&self.logits_one(x)?))
    }

    pub fn class_energy(&self, x: &[f64], y: usize) -> Result<f64, NetError> {
        let k = self.net.num_classes();
        if y >= k {
            return Err(NetError::ClassIndex {
                index: y,
                classes: k,
            });
        }
        Ok(-self.logits_one(x)?[y])
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, NetError> {
        Ok(prediction_from_logits(&self.logits_one(x)?))
    }

    pub fn predict_batch(&self, x: &Batch) -> Result<Vec<Prediction>, NetError> {
        let logits = self.net.forward(x, self.mode)?;
        Ok(logits.iter_rows().map(prediction_from_logits).collect())
    }

    pub fn labels(&self, x: &Batch) -> Result<Vec<usize>, NetError> {
        let logits = self.net.forward(x, self.mode)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    pub fn batch_energy(&self, x: &Batch) -> Result<BatchEnergy, NetError> {
        if x.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        let logits = self.net.forward(x, self.mode)?;
        let energies: Vec<f64> = logits.iter_rows().map(energy_from_logits).collect();
        let mean = energies.iter().sum::<f64>() / energies.len() as f64;
        Ok(BatchEnergy { energies, mean })
    }
}

pub fn prediction_from_logits(z: &[f64]) -> Prediction {
    Prediction {
        probs: softmax(z),
        label: argmax(z),
    }
}

impl EnergySurface for EnergyModel<'_> {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn energy_and_grad(&self, x: &Batch) -> Result<(Vec<f64>, Batch), NetError> {
        grad_input(self.net, x, self.mode)
    }
}
