//! Small feed-forward classifier with exact reverse-mode gradients.
//!
//! Each hidden block is `linear -> [norm] -> activation`; the output block is
//! a plain linear layer producing `K` logits. The flat parameter vector is laid
//! out block by block as
//!
//! ```text
//! W (fan_out x fan_in, row-major) | b (fan_out) | gamma (fan_out) | beta (fan_out)
//! ```
//!
//! where `gamma`/`beta` only exist for hidden blocks when norm layers are on.
//!
//! Weights are initialised as `a * (2u - 1)` with `a = sqrt(6 / (fan_in + fan_out))`
//! and `u` the next `f64` drawn from `ChaCha8Rng::seed_from_u64(seed)`, in
//! parameter order. Biases and `beta` start at zero, `gamma` at one.

mod backprop;
mod checkpoint;

pub use backprop::{grad_input, grad_params, value_and_grad_params, LossHead};
pub use checkpoint::{CHECKPOINT_MAGIC, load_checkpoint, save_checkpoint};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;

/// Variance floor added inside the normalisation square root.
pub const NORM_EPS: f64 = 1e-5;
/// Smallest running variance stored after a recompute.
const MIN_RUNNING_VAR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid net spec: {0}")]
    Spec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("non-finite value at layer {layer}")]
    NonFinite { layer: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("norm statistics need at least 2 samples, got {0}")]
    Stats(usize),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation input.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub use_norm_layers: bool,
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// Parameter ranges of one block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub gamma: Option<Range<usize>>,
    pub beta: Option<Range<usize>>,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
            use_norm_layers: false,
        }
    }

    pub fn with_norm(mut self, on: bool) -> Self {
        self.use_norm_layers = on;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 {
            return Err(NetError::Spec("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(NetError::Spec("num_classes must be >= 2".into()));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(NetError::Spec(format!("hidden_dims[{i}] must be >= 1")));
        }
        Ok(())
    }

    /// Block layouts in forward order; the last block is the output layer.
    pub fn layout(&self) -> Vec<BlockLayout> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        let n_blocks = dims.len() - 1;
        let mut off = 0;
        let mut out = Vec::with_capacity(n_blocks);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = off..off + fan_in * fan_out;
            off = weight.end;
            let bias = off..off + fan_out;
            off = bias.end;
            let (gamma, beta) = if self.use_norm_layers && i + 1 < n_blocks {
                let g = off..off + fan_out;
                let b = g.end..g.end + fan_out;
                off = b.end;
                (Some(g), Some(b))
            } else {
                (None, None)
            };
            out.push(BlockLayout {
                fan_in,
                fan_out,
                weight,
                bias,
                gamma,
                beta,
            });
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map_or(0, |b| b.bias.end)
    }

    pub fn norm_layer_count(&self) -> usize {
        if self.use_norm_layers {
            self.hidden_dims.len()
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    TrainBatchStats,
    #[default]
    EvalRunningStats,
}

/// Which parameters an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMask {
    #[default]
    All,
    NormAffineOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamNet {
    spec: NetSpec,
    params: Vec<f64>,
    norm_state: Vec<NormStats>,
}

pub fn init_net(spec: &NetSpec, seed: u64) -> Result<ParamNet, NetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = spec.layout();
    let mut params = vec![0.0; spec.param_count()];
    for block in &layout {
        let a = (6.0 / (block.fan_in + block.fan_out) as f64).sqrt();
        for w in &mut params[block.weight.clone()] {
            let u: f64 = rng.random();
            *w = a * (2.0 * u - 1.0);
        }
        if let Some(g) = &block.gamma {
            params[g.clone()].fill(1.0);
        }
    }
    let norm_state = spec
        .hidden_dims
        .iter()
        .take(spec.norm_layer_count())
        .map(|&h| NormStats {
            mean: vec![0.0; h],
            var: vec![1.0; h],
        })
        .collect();
    Ok(ParamNet {
        spec: spec.clone(),
        params,
        norm_state,
    })
}

impl ParamNet {
    /// Assembles a net from raw parts, checking lengths and variance positivity.
    pub fn from_parts(
        spec: NetSpec,
        params: Vec<f64>,
        norm_state: Vec<NormStats>,
    ) -> Result<Self, NetError> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(NetError::DimensionMismatch {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        if norm_state.len() != spec.norm_layer_count() {
            return Err(NetError::Spec(format!(
                "expected {} norm layers, got {}",
                spec.norm_layer_count(),
                norm_state.len()
            )));
        }
        for (st, &h) in norm_state.iter().zip(&spec.hidden_dims) {
            if st.mean.len() != h || st.var.len() != h {
                return Err(NetError::DimensionMismatch {
                    expected: h,
                    got: st.mean.len().min(st.var.len()),
                });
            }
            if st.var.iter().any(|&v| !(v > 0.0)) {
                return Err(NetError::Spec("running variance must be > 0".into()));
            }
        }
        Ok(Self {
            spec,
            params,
            norm_state,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn norm_state(&self) -> &[NormStats] {
        &self.norm_state
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Returns a copy with a replaced parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self, NetError> {
        if params.len() != self.params.len() {
            return Err(NetError::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        Ok(Self {
            spec: self.spec.clone(),
            params,
            norm_state: self.norm_state.clone(),
        })
    }

    /// Boolean mask over `params` selecting what `mask` allows to change.
    pub fn mask_flags(&self, mask: ParamMask) -> Vec<bool> {
        match mask {
            ParamMask::All => vec![true; self.params.len()],
            ParamMask::NormAffineOnly => {
                let mut flags = vec![false; self.params.len()];
                for block in self.spec.layout() {
                    for r in [block.gamma, block.beta].into_iter().flatten() {
                        flags[r].fill(true);
                    }
                }
                flags
            }
        }
    }

    /// Logits for every row of `x`.
    pub fn forward(&self, x: &Batch, mode: NormMode) -> Result<Batch, NetError> {
        Ok(backprop::forward_cached(self, x, mode)?.logits)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self
            .forward(&Batch::single(x), NormMode::EvalRunningStats)?
            .into_vec())
    }

    pub(crate) fn check_input(&self, x: &Batch) -> Result<(), NetError> {
        if x.cols() != self.spec.input_dim {
            return Err(NetError::DimensionMismatch {
                expected: self.spec.input_dim,
                got: x.cols(),
            });
        }
        if !x.is_finite() {
            return Err(NetError::NonFiniteInput);
        }
        Ok(())
    }
}

/// Replaces every norm layer's running statistics with the per-feature mean and
/// (biased) variance of `x` as it flows through the net. Later layers see the
/// activations normalised with the freshly computed statistics of earlier ones.
pub fn recompute_norm_stats(net: &ParamNet, x: &Batch) -> Result<ParamNet, NetError> {
    if x.rows() < 2 {
        return Err(NetError::Stats(x.rows()));
    }
    net.check_input(x)?;
    let cache = backprop::forward_cached(net, x, NormMode::TrainBatchStats)?;
    let norm_state = cache
        .hidden
        .iter()
        .filter_map(|h| h.batch_stats.clone())
        .map(|mut s| {
            s.var.iter_mut().for_each(|v| *v = v.max(MIN_RUNNING_VAR));
            s
        })
        .collect();
    Ok(ParamNet {
        spec: net.spec.clone(),
        params: net.params.clone(),
        norm_state,
    })
}

/// `params <- params - rate * grad`, restricted to the entries `mask` allows.
pub fn apply_update(
    net: &ParamNet,
    grad: &[f64],
    rate: f64,
    mask: ParamMask,
) -> Result<ParamNet, NetError> {
    if grad.len() != net.params.len() {
        return Err(NetError::DimensionMismatch {
            expected: net.params.len(),
            got: grad.len(),
        });
    }
    let flags = net.mask_flags(mask);
    let params = net
        .params
        .iter()
        .zip(grad)
        .zip(&flags)
        .map(|((p, g), &on)| if on { p - rate * g } else { *p })
        .collect();
    net.with_params(params)
}

/// Gradient descent with optional heavy-ball momentum. With `momentum == 0`
/// each step is exactly [`apply_update`].
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn step(
        &mut self,
        net: &ParamNet,
        grad: &[f64],
        rate: f64,
        mask: ParamMask,
    ) -> Result<ParamNet, NetError> {
        if self.momentum == 0.0 {
            return apply_update(net, grad, rate, mask);
        }
        let v = self
            .velocity
            .get_or_insert_with(|| vec![0.0; grad.len()]);
        if v.len() != grad.len() {
            return Err(NetError::DimensionMismatch {
                expected: v.len(),
                got: grad.len(),
            });
        }
        for (vi, gi) in v.iter_mut().zip(grad) {
            *vi = self.momentum * *vi + gi;
        }
        apply_update(net, v, rate, mask)
    }
}
