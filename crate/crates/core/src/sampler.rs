//! Langevin dynamics in input space.
//!
//! One step moves every row as
//!
//! ```text
//! x' = clamp(x - (alpha / 2) * clip(dE/dx) + s * eps),   s = sqrt(alpha) or 0
//! ```
//!
//! Random streams: initial draws from the uniform `p0` use
//! `ChaCha8Rng::seed_from_u64(seed)` on stream 0, consumed row-major. The
//! Gaussian noise for batch row `r` comes from the same seed on stream `r + 1`,
//! one standard-normal draw per coordinate per step. Rows therefore never share
//! randomness and the result does not depend on evaluation order.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::diffnet::NetError;
use crate::ebm::EnergySurface;
use crate::numerics::{l2_norm, mean};

#[derive(Debug, thiserror::Error)]
pub enum ChainError {
    #[error("invalid chain config: {0}")]
    Config(String),
    #[error("p0 needs at least one sample")]
    NoSamples,
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("energy evaluation failed at step {step}: {source}")]
    Net {
        step: usize,
        #[source]
        source: NetError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    SqrtAlpha,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainInit {
    FromNoiseP0,
    FromGivenX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub step_size: f64,
    pub steps: usize,
    pub noise: NoiseScale,
    pub init: ChainInit,
    /// Bounds applied to every coordinate after each step.
    pub clamp_box: Option<(f64, f64)>,
    /// Per-row maximum gradient norm.
    pub grad_clip: Option<f64>,
    /// Support of the uniform initial distribution.
    pub p0_box: (f64, f64),
    /// Number of chains drawn from `p0`; `None` means one per row of the
    /// template batch handed to [`run_chain`].
    pub p0_samples: Option<usize>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self::noisy(1.0, 20)
    }
}

impl ChainConfig {
    /// Noisy chain from `p0`, clamped to `[-1, 1]`, gradient norm clipped at 10.
    pub fn noisy(step_size: f64, steps: usize) -> Self {
        Self {
            step_size,
            steps,
            noise: NoiseScale::SqrtAlpha,
            init: ChainInit::FromNoiseP0,
            clamp_box: Some((-1.0, 1.0)),
            grad_clip: Some(10.0),
            p0_box: (-1.0, 1.0),
            p0_samples: None,
        }
    }

    /// Noise-free descent starting at the given samples, no clipping.
    pub fn descent(step_size: f64, steps: usize, clamp_box: Option<(f64, f64)>) -> Self {
        Self {
            step_size,
            steps,
            noise: NoiseScale::Zero,
            init: ChainInit::FromGivenX,
            clamp_box,
            grad_clip: None,
            p0_box: (-1.0, 1.0),
            p0_samples: None,
        }
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        if self.steps > 0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(ChainError::Config(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        for (name, bx) in [("clamp_box", self.clamp_box), ("p0_box", Some(self.p0_box))] {
            if let Some((lo, hi)) = bx {
                if !(lo < hi) {
                    return Err(ChainError::Config(format!("{name} needs lo < hi")));
                }
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(ChainError::Config("grad_clip must be > 0".into()));
            }
        }
        Ok(())
    }

    fn noise_std(&self) -> f64 {
        match self.noise {
            NoiseScale::SqrtAlpha => self.step_size.sqrt(),
            NoiseScale::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub x: Batch,
    pub step_index: usize,
    /// Mean energy before step 0 and after every step.
    pub energy_trace: Vec<f64>,
    /// Mean per-row gradient norm (before clipping) at the same points.
    pub grad_norm_trace: Vec<f64>,
}

/// Draws `n` points i.i.d. uniform on `[lo, hi)^dim`.
pub fn sample_p0(dim: usize, n: usize, seed: u64, bounds: (f64, f64)) -> Result<Batch, ChainError> {
    if n == 0 {
        return Err(ChainError::NoSamples);
    }
    let (lo, hi) = bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim)
        .map(|_| {
            let u: f64 = rng.random();
            lo + (hi - lo) * u
        })
        .collect();
    Ok(Batch::from_vec(n, dim, data).expect("p0 shape"))
}

/// Independent noise generators, one per batch row.
pub struct RowStreams {
    rngs: Vec<ChaCha8Rng>,
}

impl RowStreams {
    pub fn new(seed: u64, rows: usize) -> Self {
        let rngs = (0..rows)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64 + 1);
                rng
            })
            .collect();
        Self { rngs }
    }

    pub fn len(&self) -> usize {
        self.rngs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rngs.is_empty()
    }
}

/// Result of one Langevin update.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub x: Batch,
    /// Per-row energies at the point the step started from.
    pub energies: Vec<f64>,
    pub mean_grad_norm: f64,
}

fn eval_surface<S: EnergySurface + ?Sized>(
    m: &S,
    x: &Batch,
    step: usize,
) -> Result<(Vec<f64>, Batch, Vec<f64>), ChainError> {
    let (e, g) = m
        .energy_and_grad(x)
        .map_err(|source| ChainError::Net { step, source })?;
    if !g.is_finite() {
        return Err(ChainError::NonFiniteGradient { step });
    }
    let norms = g.iter_rows().map(l2_norm).collect();
    Ok((e, g, norms))
}

fn apply_step(
    x: &Batch,
    grad: &Batch,
    norms: &[f64],
    cfg: &ChainConfig,
    streams: &mut RowStreams,
) -> Batch {
    let half = cfg.step_size / 2.0;
    let noise_std = cfg.noise_std();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let scale = match cfg.grad_clip {
            Some(c) if norms[r] > c => c / norms[r],
            _ => 1.0,
        };
        let g = grad.row(r);
        let row = out.row_mut(r);
        for (k, v) in row.iter_mut().enumerate() {
            *v -= half * scale * g[k];
        }
        if noise_std > 0.0 {
            let rng = &mut streams.rngs[r];
            for v in row.iter_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *v += noise_std * eps;
            }
        }
        if let Some((lo, hi)) = cfg.clamp_box {
            row.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    }
    out
}

/// One Langevin update of every row of `x`. `streams` must hold one generator
/// per row when the config is noisy and is left untouched otherwise.
pub fn sgld_step<S: EnergySurface + ?Sized>(
    m: &S,
    x: &Batch,
    cfg: &ChainConfig,
    streams: &mut RowStreams,
    step_index: usize,
) -> Result<StepOutcome, ChainError> {
    if !x.is_finite() {
        return Err(ChainError::Net {
            step: step_index,
            source: NetError::NonFiniteInput,
        });
    }
    if cfg.noise_std() > 0.0 && streams.len() != x.rows() {
        return Err(ChainError::Config(format!(
            "{} noise streams for {} rows",
            streams.len(),
            x.rows()
        )));
    }
    let (energies, grad, norms) = eval_surface(m, x, step_index)?;
    let x = apply_step(x, &grad, &norms, cfg, streams);
    Ok(StepOutcome {
        x,
        energies,
        mean_grad_norm: mean(&norms),
    })
}

/// Runs `cfg.steps` updates. With `FromGivenX` the chain starts at `x0`; with
/// `FromNoiseP0` it starts from `p0`, using `x0` only to size the draw when
/// `cfg.p0_samples` is unset.
pub fn run_chain<S: EnergySurface + ?Sized>(
    m: &S,
    cfg: &ChainConfig,
    seed: u64,
    x0: Option<&Batch>,
) -> Result<ChainState, ChainError> {
    cfg.validate()?;
    let mut x = match cfg.init {
        ChainInit::FromGivenX => x0
            .ok_or_else(|| ChainError::Config("from_given_x requires x0".into()))?
            .clone(),
        ChainInit::FromNoiseP0 => {
            let n = cfg
                .p0_samples
                .or(x0.map(Batch::rows))
                .ok_or_else(|| ChainError::Config("p0 sample count unknown".into()))?;
            sample_p0(m.input_dim(), n, seed, cfg.p0_box)?
        }
    };
    if x.is_empty() {
        return Err(ChainError::NoSamples);
    }
    if x.cols() != m.input_dim() {
        return Err(ChainError::Net {
            step: 0,
            source: NetError::DimensionMismatch {
                expected: m.input_dim(),
                got: x.cols(),
            },
        });
    }
    let mut streams = match cfg.noise {
        NoiseScale::SqrtAlpha => RowStreams::new(seed, x.rows()),
        NoiseScale::Zero => RowStreams::new(seed, 0),
    };
    let mut energy_trace = Vec::with_capacity(cfg.steps + 1);
    let mut grad_norm_trace = Vec::with_capacity(cfg.steps + 1);
    if cfg.steps == 0 {
        let e = m
            .energies(&x)
            .map_err(|source| ChainError::Net { step: 0, source })?;
        energy_trace.push(mean(&e));
        return Ok(ChainState {
            x,
            step_index: 0,
            energy_trace,
            grad_norm_trace,
        });
    }
    for t in 0..cfg.steps {
        let out = sgld_step(m, &x, cfg, &mut streams, t)?;
        energy_trace.push(mean(&out.energies));
        grad_norm_trace.push(out.mean_grad_norm);
        x = out.x;
    }
    let (e, _, norms) = eval_surface(m, &x, cfg.steps)?;
    energy_trace.push(mean(&e));
    grad_norm_trace.push(mean(&norms));
    Ok(ChainState {
        x,
        step_index: cfg.steps,
        energy_trace,
        grad_norm_trace,
    })
}

/// Writes `step,mean_energy,grad_norm` rows for a finished chain.
pub fn write_trace_csv<W: Write>(state: &ChainState, mut out: W) -> Result<(), ChainError> {
    writeln!(out, "step,mean_energy,grad_norm")?;
    for (t, e) in state.energy_trace.iter().enumerate() {
        match state.grad_norm_trace.get(t) {
            Some(g) => writeln!(out, "{t},{e},{g}")?,
            None => writeln!(out, "{t},{e},")?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// E(x) = lambda / 2 * |x|^2 per row.
    struct Quadratic {
        lambda: f64,
        dim: usize,
    }

    impl EnergySurface for Quadratic {
        fn input_dim(&self) -> usize {
            self.dim
        }
        fn energy_and_grad(&self, x: &Batch) -> Result<(Vec<f64>, Batch), NetError> {
            let e = x
                .iter_rows()
                .map(|r| 0.5 * self.lambda * r.iter().map(|v| v * v).sum::<f64>())
                .collect();
            let g = x.as_slice().iter().map(|v| self.lambda * v).collect();
            Ok((e, Batch::from_vec(x.rows(), x.cols(), g).unwrap()))
        }
    }

    struct Flat;

    impl EnergySurface for Flat {
        fn input_dim(&self) -> usize {
            2
        }
        fn energy_and_grad(&self, x: &Batch) -> Result<(Vec<f64>, Batch), NetError> {
            Ok((vec![0.0; x.rows()], Batch::zeros(x.rows(), x.cols())))
        }
    }

    #[test]
    fn p0_reproducible_and_bounded() {
        let a = sample_p0(3, 5, 42, (-1.0, 1.0)).unwrap();
        let b = sample_p0(3, 5, 42, (-1.0, 1.0)).unwrap();
        assert_eq!(a, b);
        let one = sample_p0(2, 1, 0, (-1.0, 1.0)).unwrap();
        assert_eq!((one.rows(), one.cols()), (1, 2));
        assert!(one.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(sample_p0(2, 0, 0, (-1.0, 1.0)), Err(ChainError::NoSamples)));
    }

    #[test]
    fn p0_moments() {
        let s = sample_p0(1, 10_000, 2024, (-1.0, 1.0)).unwrap();
        let m = mean(s.as_slice());
        assert!(m.abs() < 0.05, "mean {m}");
        assert!(s.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn quadratic_step_noise_free() {
        let q = Quadratic { lambda: 1.0, dim: 1 };
        let cfg = ChainConfig::descent(0.5, 1, None);
        let mut streams = RowStreams::new(0, 0);
        let out = sgld_step(&q, &Batch::single(&[1.0]), &cfg, &mut streams, 0).unwrap();
        assert_eq!(out.x.as_slice(), &[0.75]);
    }

    #[test]
    fn flat_surface_noise_free_is_identity() {
        let cfg = ChainConfig::descent(0.3, 4, None);
        let x = Batch::from_rows(&[[0.1, -0.7], [2.0, 3.0]]);
        let st = run_chain(&Flat, &cfg, 1, Some(&x)).unwrap();
        assert_eq!(st.x, x);
    }

    #[test]
    fn noisy_step_replays_generator() {
        let q = Quadratic { lambda: 1.0, dim: 1 };
        let mut cfg = ChainConfig::noisy(0.5, 1);
        cfg.clamp_box = None;
        cfg.init = ChainInit::FromGivenX;
        let seed = 1234;
        let st = run_chain(&q, &cfg, seed, Some(&Batch::single(&[1.0]))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let eps: f64 = rng.sample(StandardNormal);
        assert_eq!(st.x.as_slice()[0], 0.75 + 0.5f64.sqrt() * eps);
    }

    #[test]
    fn zero_steps_returns_input() {
        let q = Quadratic { lambda: 2.0, dim: 2 };
        let x = Batch::from_rows(&[[0.3, 0.4]]);
        let st = run_chain(&q, &ChainConfig::descent(0.1, 0, None), 0, Some(&x)).unwrap();
        assert_eq!(st.x, x);
        assert_eq!(st.energy_trace.len(), 1);
        assert_eq!(st.step_index, 0);
    }

    #[test]
    fn geometric_decay_three_steps() {
        let q = Quadratic { lambda: 1.0, dim: 1 };
        let st = run_chain(&q, &ChainConfig::descent(0.5, 3, None), 0, Some(&Batch::single(&[1.0]))).unwrap();
        assert!((st.x.as_slice()[0] - 0.421875).abs() < 1e-15);
        assert_eq!(st.energy_trace.len(), 4);
        assert!(st.energy_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn from_given_requires_x0() {
        let q = Quadratic { lambda: 1.0, dim: 1 };
        assert!(matches!(
            run_chain(&q, &ChainConfig::descent(0.5, 3, None), 0, None),
            Err(ChainError::Config(_))
        ));
    }

    #[test]
    fn grad_clip_limits_move() {
        let q = Quadratic { lambda: 100.0, dim: 1 };
        let mut cfg = ChainConfig::descent(0.1, 1, None);
        cfg.grad_clip = Some(1.0);
        let st = run_chain(&q, &cfg, 0, Some(&Batch::single(&[1.0]))).unwrap();
        assert!((st.x.as_slice()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ChainConfig::descent(0.0, 3, None);
        assert!(c.validate().is_err());
        c.steps = 0;
        assert!(c.validate().is_ok());
        let c = ChainConfig::descent(0.1, 3, Some((1.0, -1.0)));
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_trace_layout() {
        let q = Quadratic { lambda: 1.0, dim: 1 };
        let st = run_chain(&q, &ChainConfig::descent(0.5, 2, None), 0, Some(&Batch::single(&[1.0]))).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&st, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,mean_energy,grad_norm");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,0.5,1");
    }
}
