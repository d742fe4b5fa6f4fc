//! Mutual test-time adaptation.
//!
//! * [`model_ada`] pulls the classifier's energy landscape toward a test batch
//!   by contrastive divergence: each step draws fresh negatives from `p0`,
//!   runs a noisy Langevin chain on them and descends
//!   `mean E(x_test) - mean E(x_neg)` in parameter space.
//! * [`data_ada`] pushes every test sample downhill on the energy of an adapted
//!   model with noise-free Langevin steps.
//! * [`mita`] adapts two models from the same source net: a lightly adapted
//!   one used for prediction and a longer-adapted one whose energy drives the
//!   data update.
//!
//! Seeds: ModelAda step `i` runs its chain with `mix_seed(seed, i)`. Inside
//! [`mita`] the prediction model uses the run seed and the data-driving model
//! uses `seed ^ 1`.

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::diffnet::{recompute_norm_stats, value_and_grad_params, LossHead, NetError, NormMode, ParamMask, ParamNet, Sgd};
use crate::ebm::{EnergyModel, Prediction};
use crate::sampler::{run_chain, ChainConfig, ChainError, ChainInit, ChainState, NoiseScale};
use crate::seeds::mix_seed;

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error("invalid adaptation config: {0}")]
    Config(String),
    #[error("empty test batch")]
    EmptyBatch,
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("model adaptation diverged at step {step} (rate {rate})")]
    Diverged { step: usize, rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelAdaConfig {
    /// Parameter step size.
    pub rate: f64,
    /// Number of contrastive-divergence updates.
    pub steps: usize,
    /// Negative-sample chain; must be noisy and start from `p0`.
    pub chain: ChainConfig,
    pub param_mask: ParamMask,
    /// Negatives per step; defaults to the test batch size.
    pub negatives: Option<usize>,
    /// Norm mode for the parameter gradient.
    pub loss_norm_mode: NormMode,
    /// Norm mode for the energies the chains descend.
    pub sample_norm_mode: NormMode,
    pub momentum: f64,
    /// Re-estimate norm statistics on the test batch before every update.
    pub recompute_norm: bool,
}

impl Default for ModelAdaConfig {
    fn default() -> Self {
        Self {
            rate: 1e-2,
            steps: 3,
            chain: ChainConfig::noisy(1.0, 20),
            param_mask: ParamMask::All,
            negatives: None,
            loss_norm_mode: NormMode::EvalRunningStats,
            sample_norm_mode: NormMode::EvalRunningStats,
            momentum: 0.0,
            recompute_norm: true,
        }
    }
}

impl ModelAdaConfig {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(AdaptError::Config(format!("rate must be >= 0, got {}", self.rate)));
        }
        if self.chain.noise != NoiseScale::SqrtAlpha || self.chain.init != ChainInit::FromNoiseP0 {
            return Err(AdaptError::Config(
                "model adaptation chains must be noisy and start from p0".into(),
            ));
        }
        if self.negatives == Some(0) {
            return Err(AdaptError::Config("negatives must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AdaptError::Config("momentum must lie in [0, 1)".into()));
        }
        self.chain.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataAdaConfig {
    pub step_size: f64,
    pub steps: usize,
    pub clamp_box: Option<(f64, f64)>,
    pub norm_mode: NormMode,
}

impl Default for DataAdaConfig {
    fn default() -> Self {
        Self {
            step_size: 0.2,
            steps: 5,
            clamp_box: Some((-1.0, 1.0)),
            norm_mode: NormMode::EvalRunningStats,
        }
    }
}

impl DataAdaConfig {
    pub fn chain(&self) -> ChainConfig {
        ChainConfig::descent(self.step_size, self.steps, self.clamp_box)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitaConfig {
    /// Produces the model used for prediction.
    pub inference: ModelAdaConfig,
    /// Produces the model whose energy drives data adaptation. Its step count
    /// (15 by default, against 3 for `inference`) is a tuning choice.
    pub generator: ModelAdaConfig,
    pub data: DataAdaConfig,
    /// Use the prediction model for data adaptation too.
    pub share_model: bool,
}

impl Default for MitaConfig {
    fn default() -> Self {
        Self {
            inference: ModelAdaConfig::default(),
            generator: ModelAdaConfig::default().with_steps(15),
            data: DataAdaConfig::default(),
            share_model: false,
        }
    }
}

impl MitaConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        self.inference.validate()?;
        self.generator.validate()?;
        if !self.share_model && self.generator.steps < self.inference.steps {
            return Err(AdaptError::Config(format!(
                "generator steps ({}) must be >= inference steps ({})",
                self.generator.steps, self.inference.steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelAdaTraces {
    /// `mean E(x_test) - mean E(x_neg)` before each update.
    pub cd_loss: Vec<f64>,
    pub pos_energy: Vec<f64>,
    pub neg_energy: Vec<f64>,
    /// Parameter step size actually used at each update.
    pub rate: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelAdaOutcome {
    pub net: ParamNet,
    pub traces: ModelAdaTraces,
    /// Final chain of every step, kept for trace dumps.
    pub chains: Vec<ChainState>,
}

#[derive(Debug, Clone)]
pub struct DataAdaOutcome {
    pub x: Batch,
    /// Mean batch energy before the first step and after each step.
    pub energy_trace: Vec<f64>,
}

/// Traces of one adaptation run in a serialisable form.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptTraces {
    pub inference: ModelAdaTraces,
    pub generator: Option<ModelAdaTraces>,
    pub data_energy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub inference_net: ParamNet,
    pub generator_net: ParamNet,
    pub adapted_batch: Batch,
    pub traces: AdaptTraces,
    pub inference_chains: Vec<ChainState>,
}

enum StepFailure {
    Diverged,
    Fatal(AdaptError),
}

impl From<NetError> for StepFailure {
    fn from(e: NetError) -> Self {
        match e {
            NetError::NonFinite { .. } => StepFailure::Diverged,
            other => StepFailure::Fatal(other.into()),
        }
    }
}

struct StepResult {
    net: ParamNet,
    pos: f64,
    neg: f64,
    chain: ChainState,
}

fn cd_step(
    net: &ParamNet,
    x_test: &Batch,
    cfg: &ModelAdaConfig,
    chain_seed: u64,
    rate: f64,
    opt: &mut Sgd,
) -> Result<StepResult, StepFailure> {
    let mut chain_cfg = cfg.chain.clone();
    chain_cfg.p0_samples = Some(cfg.negatives.unwrap_or(x_test.rows()));
    let sampler_view = EnergyModel::with_mode(net, cfg.sample_norm_mode);
    let chain = match run_chain(&sampler_view, &chain_cfg, chain_seed, None) {
        Ok(c) => c,
        Err(ChainError::NonFiniteGradient { .. })
        | Err(ChainError::Net {
            source: NetError::NonFinite { .. },
            ..
        }) => return Err(StepFailure::Diverged),
        Err(e) => return Err(StepFailure::Fatal(e.into())),
    };
    let (pos, g_pos) = value_and_grad_params(net, x_test, LossHead::MeanEnergy, cfg.loss_norm_mode)?;
    let (neg, g_neg) = value_and_grad_params(net, &chain.x, LossHead::MeanEnergy, cfg.loss_norm_mode)?;
    let loss = pos - neg;
    if !loss.is_finite() {
        return Err(StepFailure::Diverged);
    }
    let grad: Vec<f64> = g_pos.iter().zip(&g_neg).map(|(a, b)| a - b).collect();
    let mut trial = opt.clone();
    let next = trial.step(net, &grad, rate, cfg.param_mask)?;
    if next.params().iter().any(|p| !p.is_finite()) {
        return Err(StepFailure::Diverged);
    }
    *opt = trial;
    Ok(StepResult {
        net: next,
        pos,
        neg,
        chain,
    })
}

/// Contrastive-divergence adaptation of `net` to the unlabeled batch `x_test`.
///
/// A step whose loss or update is non-finite is rejected; the rate is halved
/// once and the step retried. A second failure aborts with
/// [`AdaptError::Diverged`].
pub fn model_ada(
    net: &ParamNet,
    x_test: &Batch,
    cfg: &ModelAdaConfig,
    seed: u64,
) -> Result<ModelAdaOutcome, AdaptError> {
    if x_test.is_empty() {
        return Err(AdaptError::EmptyBatch);
    }
    cfg.validate()?;
    let mut cur = net.clone();
    let mut rate = cfg.rate;
    let mut halved = false;
    let mut opt = Sgd::new(cfg.momentum);
    let mut traces = ModelAdaTraces::default();
    let mut chains = Vec::with_capacity(cfg.steps);
    let mut i = 0;
    let recompute = cfg.recompute_norm && net.spec().use_norm_layers && x_test.rows() >= 2;
    while i < cfg.steps {
        if recompute {
            match recompute_norm_stats(&cur, x_test) {
                Ok(n) => cur = n,
                Err(NetError::NonFinite { .. }) if !halved => {
                    halved = true;
                    rate /= 2.0;
                    continue;
                }
                Err(NetError::NonFinite { .. }) => return Err(AdaptError::Diverged { step: i, rate }),
                Err(e) => return Err(e.into()),
            }
        }
        match cd_step(&cur, x_test, cfg, mix_seed(seed, i as u64), rate, &mut opt) {
            Ok(step) => {
                traces.cd_loss.push(step.pos - step.neg);
                traces.pos_energy.push(step.pos);
                traces.neg_energy.push(step.neg);
                traces.rate.push(rate);
                chains.push(step.chain);
                cur = step.net;
                i += 1;
            }
            Err(StepFailure::Diverged) if !halved => {
                halved = true;
                rate /= 2.0;
            }
            Err(StepFailure::Diverged) => return Err(AdaptError::Diverged { step: i, rate }),
            Err(StepFailure::Fatal(e)) => return Err(e),
        }
    }
    Ok(ModelAdaOutcome {
        net: cur,
        traces,
        chains,
    })
}

/// Noise-free energy descent of every test sample under `net`. Consumes no
/// randomness; `steps == 0` returns the batch unchanged.
pub fn data_ada(net: &ParamNet, x_test: &Batch, cfg: &DataAdaConfig) -> Result<DataAdaOutcome, AdaptError> {
    if x_test.is_empty() {
        return Err(AdaptError::EmptyBatch);
    }
    let model = EnergyModel::with_mode(net, cfg.norm_mode);
    let state = run_chain(&model, &cfg.chain(), 0, Some(x_test))?;
    Ok(DataAdaOutcome {
        x: state.x,
        energy_trace: state.energy_trace,
    })
}

/// Full mutual adaptation: two model adaptations from the same source net, data
/// adaptation under the longer-adapted one, prediction under the other.
pub fn mita(
    net: &ParamNet,
    x_test: &Batch,
    cfg: &MitaConfig,
    seed: u64,
) -> Result<(Vec<Prediction>, AdaptOutcome), AdaptError> {
    if x_test.is_empty() {
        return Err(AdaptError::EmptyBatch);
    }
    cfg.validate()?;
    let (inference, generator) = if cfg.share_model {
        (model_ada(net, x_test, &cfg.inference, seed)?, None)
    } else {
        let (a, b) = rayon::join(
            || model_ada(net, x_test, &cfg.inference, seed),
            || model_ada(net, x_test, &cfg.generator, seed ^ 1),
        );
        (a?, Some(b?))
    };
    let data_net = generator.as_ref().map_or(&inference.net, |g| &g.net);
    let data = data_ada(data_net, x_test, &cfg.data)?;
    let predictions = EnergyModel::new(&inference.net).predict_batch(&data.x)?;
    let generator_net = data_net.clone();
    let outcome = AdaptOutcome {
        generator_net,
        adapted_batch: data.x,
        traces: AdaptTraces {
            inference: inference.traces,
            generator: generator.map(|g| g.traces),
            data_energy: data.energy_trace,
        },
        inference_net: inference.net,
        inference_chains: inference.chains,
    };
    Ok((predictions, outcome))
}
