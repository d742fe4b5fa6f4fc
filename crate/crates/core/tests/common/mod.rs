//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use mita::batch::Batch;
use mita::diffnet::{
    grad_input, init_net, recompute_norm_stats, value_and_grad_params, Activation, LossHead, NetError, NetSpec, NormMode,
    ParamNet,
};
use mita::ebm::EnergySurface;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    MeanEnergy,
    MeanEntropy,
    Contrastive,
    CrossEntropy,
}

/// One randomly drawn (net, input, loss head) case.
pub struct Triple {
    pub net: ParamNet,
    pub x: Batch,
    pub head: HeadKind,
    pub negatives: Batch,
    pub labels: Vec<usize>,
    pub mode: NormMode,
}

impl Triple {
    pub fn head(&self) -> LossHead<'_> {
        match self.head {
            HeadKind::MeanEnergy => LossHead::MeanEnergy,
            HeadKind::MeanEntropy => LossHead::MeanEntropy,
            HeadKind::Contrastive => LossHead::ContrastiveDivergence {
                negatives: &self.negatives,
            },
            HeadKind::CrossEntropy => LossHead::CrossEntropy { labels: &self.labels },
        }
    }
}

fn normal_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Batch {
    let v = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Batch::from_vec(rows, cols, v).unwrap()
}

/// Smooth (tanh) nets of random shape with perturbed parameters and
/// non-trivial running statistics. Cycles through every head and norm mode.
pub fn random_triple(index: u64) -> Triple {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + index);
    let d = rng.random_range(1..=4);
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=5)).collect();
    let k = rng.random_range(2..=4);
    let norm = rng.random_bool(0.7);
    let spec = NetSpec::new(d, hidden, k)
        .with_norm(norm)
        .with_activation(Activation::Tanh);
    let base = init_net(&spec, index).unwrap();
    let params: Vec<f64> = base
        .params()
        .iter()
        .map(|p| p + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut net = base.with_params(params).unwrap();
    if norm {
        net = recompute_norm_stats(&net, &normal_batch(&mut rng, 16, d)).unwrap();
    }
    // two-row batches through a train-mode norm layer have near-zero input
    // gradients, which finite differences cannot resolve
    let rows = rng.random_range(3..=6);
    let x = normal_batch(&mut rng, rows, d);
    let n_neg = rng.random_range(2..=4);
    let negatives = normal_batch(&mut rng, n_neg, d);
    let labels = (0..rows).map(|_| rng.random_range(0..k)).collect();
    let head = [HeadKind::MeanEnergy, HeadKind::MeanEntropy, HeadKind::Contrastive, HeadKind::CrossEntropy]
        [(index % 4) as usize];
    let mode = if (index / 4) % 2 == 0 {
        NormMode::EvalRunningStats
    } else {
        NormMode::TrainBatchStats
    };
    Triple {
        net,
        x,
        head,
        negatives,
        labels,
        mode,
    }
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when both
/// vectors are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn loss_at(t: &Triple, net: &ParamNet) -> f64 {
    value_and_grad_params(net, &t.x, t.head(), t.mode).unwrap().0
}

/// Central differences of the loss with respect to every parameter.
pub fn fd_params(t: &Triple) -> Vec<f64> {
    let p = t.net.params().to_vec();
    (0..p.len())
        .map(|i| {
            let mut hi = p.clone();
            hi[i] += FD_STEP;
            let mut lo = p.clone();
            lo[i] -= FD_STEP;
            let f_hi = loss_at(t, &t.net.with_params(hi).unwrap());
            let f_lo = loss_at(t, &t.net.with_params(lo).unwrap());
            (f_hi - f_lo) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Sum of row energies computed from raw logits.
pub fn energy_sum(net: &ParamNet, x: &Batch, mode: NormMode) -> f64 {
    let logits = net.forward(x, mode).unwrap();
    logits
        .iter_rows()
        .map(|z| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            -(m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
        })
        .sum()
}

/// Central differences of the summed energy with respect to every input entry.
pub fn fd_input(net: &ParamNet, x: &Batch, mode: NormMode) -> Vec<f64> {
    let base = x.as_slice().to_vec();
    (0..base.len())
        .map(|i| {
            let mut hi = base.clone();
            hi[i] += FD_STEP;
            let mut lo = base.clone();
            lo[i] -= FD_STEP;
            let f_hi = energy_sum(net, &Batch::from_vec(x.rows(), x.cols(), hi).unwrap(), mode);
            let f_lo = energy_sum(net, &Batch::from_vec(x.rows(), x.cols(), lo).unwrap(), mode);
            (f_hi - f_lo) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Worst parameter- and input-gradient relative errors for one triple.
pub fn check_triple(t: &Triple) -> (f64, f64) {
    let (_, g) = value_and_grad_params(&t.net, &t.x, t.head(), t.mode).unwrap();
    let ep = relative_error(&g, &fd_params(t));
    let (_, gx) = grad_input(&t.net, &t.x, t.mode).unwrap();
    let ei = relative_error(gx.as_slice(), &fd_input(&t.net, &t.x, t.mode));
    (ep, ei)
}

/// `E(x) = lambda/2 * |x|^2`.
pub struct Quadratic {
    pub dim: usize,
    pub lambda: f64,
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

/// Exponential family on `{-1, 0, 1}` with `E_theta(x) = theta * g(x)`,
/// `g(x) = -x`.
pub struct FiniteToy {
    pub theta: f64,
}

impl FiniteToy {
    pub const DOMAIN: [f64; 3] = [-1.0, 0.0, 1.0];

    pub fn g(x: f64) -> f64 {
        -x
    }

    /// Exact probabilities by summation over the domain.
    pub fn probs(&self) -> [f64; 3] {
        let w = Self::DOMAIN.map(|x| (-self.theta * Self::g(x)).exp());
        let z: f64 = w.iter().sum();
        w.map(|v| v / z)
    }

    pub fn mean_g(&self) -> f64 {
        let p = self.probs();
        Self::DOMAIN.iter().zip(p).map(|(x, q)| q * Self::g(*x)).sum()
    }

    pub fn var_g(&self) -> f64 {
        let p = self.probs();
        let m = self.mean_g();
        Self::DOMAIN.iter().zip(p).map(|(x, q)| q * (Self::g(*x) - m).powi(2)).sum()
    }

    /// Exact i.i.d. draws by inverting the categorical CDF.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let p = self.probs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                if u < p[0] {
                    -1.0
                } else if u < p[0] + p[1] {
                    0.0
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// A two-logit linear net whose logits are both `theta * x`, so
    /// `E(x) = -theta * x - ln 2`: the toy energy up to a constant. Its two
    /// weights are tied copies of `theta`.
    pub fn as_net(&self) -> ParamNet {
        let spec = NetSpec::new(1, vec![], 2);
        let net = init_net(&spec, 0).unwrap();
        let layout = spec.layout();
        let mut p = vec![0.0; spec.param_count()];
        for i in layout[0].weight.clone() {
            p[i] = self.theta;
        }
        net.with_params(p).unwrap()
    }
}

/// Derivative of the module's CD loss along the tied parameter `theta`.
pub fn module_cd_gradient(toy: &FiniteToy, data: &[f64], negatives: &[f64]) -> f64 {
    let net = toy.as_net();
    let xd = Batch::from_vec(data.len(), 1, data.to_vec()).unwrap();
    let xn = Batch::from_vec(negatives.len(), 1, negatives.to_vec()).unwrap();
    let (_, g) = value_and_grad_params(
        &net,
        &xd,
        LossHead::ContrastiveDivergence { negatives: &xn },
        NormMode::EvalRunningStats,
    )
    .unwrap();
    net.spec().layout()[0].weight.clone().map(|i| g[i]).sum()
}
