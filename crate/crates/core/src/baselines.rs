//! One adapt-and-predict interface over every compared method.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapt::{mita, model_ada, AdaptError, AdaptTraces, DataAdaConfig, MitaConfig, ModelAdaConfig};
use crate::batch::Batch;
use crate::diffnet::{apply_update, recompute_norm_stats, value_and_grad_params, LossHead, NetError, NormMode, ParamMask, ParamNet};
use crate::ebm::EnergyModel;
use crate::sampler::ChainState;

#[derive(Debug, thiserror::Error)]
pub enum MethodError {
    #[error("negative probability {value} in row {row}")]
    NegativeProbability { row: usize, value: f64 },
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Method names, in the fixed order used by reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Source,
    BnStats,
    TentEntropy,
    ModelOnly,
    MitaWoM,
    MitaSame,
    Mita,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Source,
        MethodKind::BnStats,
        MethodKind::TentEntropy,
        MethodKind::ModelOnly,
        MethodKind::MitaWoM,
        MethodKind::MitaSame,
        MethodKind::Mita,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Source => "source",
            MethodKind::BnStats => "bn_stats",
            MethodKind::TentEntropy => "tent_entropy",
            MethodKind::ModelOnly => "model_only",
            MethodKind::MitaWoM => "mita_wo_m",
            MethodKind::MitaSame => "mita_same",
            MethodKind::Mita => "mita",
        }
    }

    pub fn parse(s: &str) -> Result<Self, MethodError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MethodError::UnknownMethod(s.to_string()))
    }

    /// Whether the method adapts by contrastive divergence.
    pub fn uses_model_ada(self) -> bool {
        matches!(self, MethodKind::ModelOnly | MethodKind::Mita | MethodKind::MitaSame)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TentConfig {
    pub steps: usize,
    pub rate: f64,
    /// Recompute norm statistics on the test batch before the entropy steps.
    pub recompute_norm: bool,
    pub norm_mode: NormMode,
}

impl Default for TentConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            rate: 1e-2,
            recompute_norm: true,
            norm_mode: NormMode::EvalRunningStats,
        }
    }
}

/// Per-method settings from which every [`Method`] is built.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSettings {
    pub tent: TentConfig,
    /// Shared by `mita`, `mita_same`, `mita_wo_m` and (through its inference
    /// part) `model_only`.
    pub mita: MitaConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Source,
    BnStats,
    TentEntropy(TentConfig),
    ModelOnly(ModelAdaConfig),
    Mita(MitaConfig),
    MitaWoM(DataAdaConfig),
    MitaSame(MitaConfig),
}

impl Method {
    pub fn from_kind(kind: MethodKind, settings: &MethodSettings) -> Self {
        match kind {
            MethodKind::Source => Method::Source,
            MethodKind::BnStats => Method::BnStats,
            MethodKind::TentEntropy => Method::TentEntropy(settings.tent.clone()),
            MethodKind::ModelOnly => Method::ModelOnly(settings.mita.inference.clone()),
            MethodKind::Mita => Method::Mita(MitaConfig {
                share_model: false,
                ..settings.mita.clone()
            }),
            MethodKind::MitaWoM => Method::MitaWoM(settings.mita.data.clone()),
            MethodKind::MitaSame => Method::MitaSame(MitaConfig {
                share_model: true,
                ..settings.mita.clone()
            }),
        }
    }

    pub fn kind(&self) -> MethodKind {
        match self {
            Method::Source => MethodKind::Source,
            Method::BnStats => MethodKind::BnStats,
            Method::TentEntropy(_) => MethodKind::TentEntropy,
            Method::ModelOnly(_) => MethodKind::ModelOnly,
            Method::Mita(_) => MethodKind::Mita,
            Method::MitaWoM(_) => MethodKind::MitaWoM,
            Method::MitaSame(_) => MethodKind::MitaSame,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub labels: Vec<usize>,
    /// The net used for prediction, for methods that change it.
    pub adapted_net: Option<ParamNet>,
    pub adapt_traces: Option<AdaptTraces>,
    /// Mean entropy before each entropy step and after the last one.
    pub entropy_trace: Option<Vec<f64>>,
    /// Final negative-sample chain of every model update.
    pub chains: Vec<ChainState>,
}

impl MethodOutput {
    fn labels_only(labels: Vec<usize>) -> Self {
        Self {
            labels,
            adapted_net: None,
            adapt_traces: None,
            entropy_trace: None,
            chains: Vec::new(),
        }
    }
}

/// Mean over rows of `-Σ p log p`.
pub fn entropy_loss(probs: &Batch) -> Result<f64, MethodError> {
    let mut total = 0.0;
    for (row, p) in probs.iter_rows().enumerate() {
        if let Some(&value) = p.iter().find(|&&v| v < 0.0) {
            return Err(MethodError::NegativeProbability { row, value });
        }
        total -= p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    }
    Ok(total / probs.rows().max(1) as f64)
}

fn tent(net: &ParamNet, x: &Batch, cfg: &TentConfig) -> Result<(ParamNet, Vec<f64>), MethodError> {
    let mut cur = if cfg.recompute_norm && net.spec().use_norm_layers && x.rows() >= 2 {
        recompute_norm_stats(net, x)?
    } else {
        net.clone()
    };
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (h, g) = value_and_grad_params(&cur, x, LossHead::MeanEntropy, cfg.norm_mode)?;
        trace.push(h);
        cur = apply_update(&cur, &g, cfg.rate, ParamMask::NormAffineOnly)?;
    }
    if cfg.steps > 0 {
        let probs = EnergyModel::with_mode(&cur, cfg.norm_mode).predict_batch(x)?;
        let rows: Vec<Vec<f64>> = probs.into_iter().map(|p| p.probs).collect();
        trace.push(entropy_loss(&Batch::from_rows(&rows))?);
    }
    Ok((cur, trace))
}

/// Adapts (a copy of) `net` to `x_test` the way `method` prescribes and returns
/// predicted labels. The caller's net is never modified.
pub fn adapt_and_predict(method: &Method, net: &ParamNet, x_test: &Batch, seed: u64) -> Result<MethodOutput, MethodError> {
    if x_test.is_empty() {
        return Err(AdaptError::EmptyBatch.into());
    }
    match method {
        Method::Source => Ok(MethodOutput::labels_only(EnergyModel::new(net).labels(x_test)?)),
        Method::BnStats => {
            let adapted = if net.spec().use_norm_layers {
                recompute_norm_stats(net, x_test)?
            } else {
                net.clone()
            };
            let labels = EnergyModel::new(&adapted).labels(x_test)?;
            Ok(MethodOutput {
                adapted_net: Some(adapted),
                ..MethodOutput::labels_only(labels)
            })
        }
        Method::TentEntropy(cfg) => {
            let (adapted, trace) = tent(net, x_test, cfg)?;
            let labels = EnergyModel::new(&adapted).labels(x_test)?;
            Ok(MethodOutput {
                labels,
                adapted_net: Some(adapted),
                adapt_traces: None,
                entropy_trace: Some(trace),
                chains: Vec::new(),
            })
        }
        Method::ModelOnly(cfg) => {
            let out = model_ada(net, x_test, cfg, seed)?;
            let labels = EnergyModel::new(&out.net).labels(x_test)?;
            Ok(MethodOutput {
                labels,
                adapted_net: Some(out.net),
                adapt_traces: Some(AdaptTraces {
                    inference: out.traces,
                    ..AdaptTraces::default()
                }),
                entropy_trace: None,
                chains: out.chains,
            })
        }
        Method::MitaWoM(data) => {
            let cfg = MitaConfig {
                inference: ModelAdaConfig::default().with_steps(0),
                generator: ModelAdaConfig::default().with_steps(0),
                data: data.clone(),
                share_model: false,
            };
            run_mita(net, x_test, &cfg, seed)
        }
        Method::Mita(cfg) | Method::MitaSame(cfg) => run_mita(net, x_test, cfg, seed),
    }
}

fn run_mita(net: &ParamNet, x: &Batch, cfg: &MitaConfig, seed: u64) -> Result<MethodOutput, MethodError> {
    let (preds, out) = mita(net, x, cfg, seed)?;
    Ok(MethodOutput {
        labels: preds.into_iter().map(|p| p.label).collect(),
        adapted_net: Some(out.inference_net),
        adapt_traces: Some(out.traces),
        entropy_trace: None,
        chains: out.inference_chains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{init_net, NetSpec};

    fn toy() -> (ParamNet, Batch) {
        let net = init_net(&NetSpec::new(2, vec![6], 3).with_norm(true), 21).unwrap();
        let rows: Vec<[f64; 2]> = (0..12).map(|i| [(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()]).collect();
        (net, Batch::from_rows(&rows))
    }

    fn small_settings() -> MethodSettings {
        let mut s = MethodSettings::default();
        s.mita.inference.chain.steps = 4;
        s.mita.generator.chain.steps = 4;
        s.mita.generator.steps = 4;
        s
    }

    #[test]
    fn entropy_values() {
        let one_hot = Batch::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(entropy_loss(&one_hot).unwrap(), 0.0);
        let uniform = Batch::from_rows(&[[0.1; 10], [0.1; 10]]);
        assert!((entropy_loss(&uniform).unwrap() - 10f64.ln()).abs() < 1e-12);
        let two = Batch::from_rows(&[[0.9, 0.1]]);
        assert!((entropy_loss(&two).unwrap() - 0.325_082_973_391_448).abs() < 1e-12);
        assert!(matches!(
            entropy_loss(&Batch::from_rows(&[[1.1, -0.1]])),
            Err(MethodError::NegativeProbability { .. })
        ));
    }

    #[test]
    fn names_round_trip() {
        for k in MethodKind::ALL {
            assert_eq!(MethodKind::parse(k.name()).unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!(MethodKind::parse("eata").is_err());
    }

    #[test]
    fn source_matches_direct_predict() {
        let (net, x) = toy();
        let out = adapt_and_predict(&Method::Source, &net, &x, 0).unwrap();
        assert_eq!(out.labels, EnergyModel::new(&net).labels(&x).unwrap());
    }

    #[test]
    fn model_only_zero_steps_is_source() {
        let (net, x) = toy();
        let m = Method::ModelOnly(ModelAdaConfig::default().with_steps(0));
        let a = adapt_and_predict(&m, &net, &x, 3).unwrap();
        let b = adapt_and_predict(&Method::Source, &net, &x, 3).unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn tent_zero_steps_degenerates() {
        let (net, x) = toy();
        let bn = adapt_and_predict(&Method::BnStats, &net, &x, 0).unwrap();
        let src = adapt_and_predict(&Method::Source, &net, &x, 0).unwrap();
        let on = TentConfig { steps: 0, ..TentConfig::default() };
        let off = TentConfig { steps: 0, recompute_norm: false, ..TentConfig::default() };
        let t_on = adapt_and_predict(&Method::TentEntropy(on), &net, &x, 0).unwrap();
        let t_off = adapt_and_predict(&Method::TentEntropy(off), &net, &x, 0).unwrap();
        assert_eq!(t_on.labels, bn.labels);
        assert_eq!(t_on.adapted_net, bn.adapted_net);
        assert_eq!(t_off.labels, src.labels);
    }

    #[test]
    fn tent_only_moves_norm_affine() {
        let (net, x) = toy();
        let cfg = TentConfig { recompute_norm: false, rate: 0.5, ..TentConfig::default() };
        let out = adapt_and_predict(&Method::TentEntropy(cfg), &net, &x, 0).unwrap();
        let adapted = out.adapted_net.unwrap();
        let flags = net.mask_flags(ParamMask::NormAffineOnly);
        let mut moved = false;
        for ((a, b), f) in adapted.params().iter().zip(net.params()).zip(flags) {
            if f {
                moved |= a != b;
            } else {
                assert_eq!(a, b);
            }
        }
        assert!(moved);
        assert_eq!(out.entropy_trace.unwrap().len(), 11);
    }

    #[test]
    fn caller_net_untouched() {
        let (net, x) = toy();
        let before = net.clone();
        let settings = small_settings();
        for k in MethodKind::ALL {
            adapt_and_predict(&Method::from_kind(k, &settings), &net, &x, 1).unwrap();
        }
        assert_eq!(net, before);
    }

    #[test]
    fn mita_wo_m_predicts_with_source_net() {
        let (net, x) = toy();
        let settings = small_settings();
        let out = adapt_and_predict(&Method::from_kind(MethodKind::MitaWoM, &settings), &net, &x, 1).unwrap();
        assert_eq!(out.adapted_net.unwrap(), net);
    }
}
