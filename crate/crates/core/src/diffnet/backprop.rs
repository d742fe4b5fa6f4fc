use crate::batch::Batch;
use crate::numerics::{logsumexp, softmax};

use super::{NetError, NormMode, NormStats, ParamNet, NORM_EPS};

/// Scalar losses of the logits that the net can differentiate.
#[derive(Debug, Clone, Copy)]
pub enum LossHead<'a> {
    /// Mean over rows of `-logsumexp(logits)`.
    MeanEnergy,
    /// Mean over rows of the softmax entropy.
    MeanEntropy,
    /// `mean E(x) - mean E(negatives)`.
    ContrastiveDivergence { negatives: &'a Batch },
    /// Mean cross-entropy against integer labels.
    CrossEntropy { labels: &'a [usize] },
}

pub(crate) struct HiddenCache {
    input: Batch,
    xhat: Option<Vec<f64>>,
    inv_std: Option<Vec<f64>>,
    pre_act: Vec<f64>,
    pub(crate) batch_stats: Option<NormStats>,
}

pub(crate) struct ForwardCache {
    pub(crate) hidden: Vec<HiddenCache>,
    last_input: Batch,
    pub(crate) logits: Batch,
    mode: NormMode,
}

fn linear(x: &Batch, w: &[f64], b: &[f64], fan_out: usize) -> Vec<f64> {
    let fan_in = x.cols();
    let mut out = Vec::with_capacity(x.rows() * fan_out);
    for row in x.iter_rows() {
        for o in 0..fan_out {
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            let s: f64 = wr.iter().zip(row).map(|(a, b)| a * b).sum();
            out.push(s + b[o]);
        }
    }
    out
}

fn ensure_finite(v: &[f64], layer: usize) -> Result<(), NetError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NetError::NonFinite { layer })
    }
}

pub(crate) fn forward_cached(
    net: &ParamNet,
    x: &Batch,
    mode: NormMode,
) -> Result<ForwardCache, NetError> {
    net.check_input(x)?;
    let layout = net.spec.layout();
    let act = net.spec.activation;
    let n = x.rows();
    let mut hidden = Vec::with_capacity(layout.len() - 1);
    let mut cur = x.clone();
    for (li, block) in layout[..layout.len() - 1].iter().enumerate() {
        let fo = block.fan_out;
        let z = linear(
            &cur,
            &net.params[block.weight.clone()],
            &net.params[block.bias.clone()],
            fo,
        );
        ensure_finite(&z, li)?;
        let (pre_act, xhat, inv_std, batch_stats) = match (&block.gamma, &block.beta) {
            (Some(g), Some(bt)) => {
                let (mean, var, stats) = match mode {
                    NormMode::EvalRunningStats => {
                        let st = &net.norm_state[li];
                        (st.mean.clone(), st.var.clone(), None)
                    }
                    NormMode::TrainBatchStats => {
                        let mut mean = vec![0.0; fo];
                        for i in 0..n {
                            for f in 0..fo {
                                mean[f] += z[i * fo + f];
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= n as f64);
                        let mut var = vec![0.0; fo];
                        for i in 0..n {
                            for f in 0..fo {
                                let d = z[i * fo + f] - mean[f];
                                var[f] += d * d;
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= n as f64);
                        let st = NormStats {
                            mean: mean.clone(),
                            var: var.clone(),
                        };
                        (mean, var, Some(st))
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                let gamma = &net.params[g.clone()];
                let beta = &net.params[bt.clone()];
                let mut xhat = vec![0.0; n * fo];
                let mut pre = vec![0.0; n * fo];
                for i in 0..n {
                    for f in 0..fo {
                        let k = i * fo + f;
                        xhat[k] = (z[k] - mean[f]) * inv_std[f];
                        pre[k] = gamma[f] * xhat[k] + beta[f];
                    }
                }
                (pre, Some(xhat), Some(inv_std), stats)
            }
            _ => (z, None, None, None),
        };
        ensure_finite(&pre_act, li)?;
        let out: Vec<f64> = pre_act.iter().map(|&v| act.apply(v)).collect();
        let next = Batch::from_vec(n, fo, out).expect("layer output shape");
        hidden.push(HiddenCache {
            input: std::mem::replace(&mut cur, next),
            xhat,
            inv_std,
            pre_act,
            batch_stats,
        });
    }
    let last = layout.last().expect("output block");
    let logits = linear(
        &cur,
        &net.params[last.weight.clone()],
        &net.params[last.bias.clone()],
        last.fan_out,
    );
    ensure_finite(&logits, layout.len() - 1)?;
    Ok(ForwardCache {
        hidden,
        last_input: cur,
        logits: Batch::from_vec(n, last.fan_out, logits).expect("logit shape"),
        mode,
    })
}

/// Accumulates `dW += dzᵀ·input`, `db += Σ dz` and returns `dz·W`.
fn linear_backward(
    input: &Batch,
    dz: &[f64],
    w: &[f64],
    fan_out: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let fan_in = input.cols();
    let mut dinput = vec![0.0; input.rows() * fan_in];
    for (i, row) in input.iter_rows().enumerate() {
        let drow = &mut dinput[i * fan_in..(i + 1) * fan_in];
        for o in 0..fan_out {
            let d = dz[i * fan_out + o];
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            let gwr = &mut gw[o * fan_in..(o + 1) * fan_in];
            for k in 0..fan_in {
                gwr[k] += d * row[k];
                drow[k] += d * wr[k];
            }
        }
    }
    dinput
}

/// Reverse pass: gradient of the scalar whose logit-gradient is `dlogits`
/// with respect to the parameters and to the input rows.
pub(crate) fn backward(
    net: &ParamNet,
    cache: &ForwardCache,
    dlogits: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NetError> {
    let layout = net.spec.layout();
    let act = net.spec.activation;
    let mut grad = vec![0.0; net.params.len()];
    let last = layout.last().expect("output block");
    let (head, _) = grad.split_at_mut(last.bias.end);
    let (gw, gb) = head[last.weight.start..].split_at_mut(last.weight.len());
    let mut dh = linear_backward(
        &cache.last_input,
        dlogits,
        &net.params[last.weight.clone()],
        last.fan_out,
        gw,
        gb,
    );
    ensure_finite(&dh, layout.len() - 1)?;
    for (li, (block, hc)) in layout.iter().zip(&cache.hidden).enumerate().rev() {
        let fo = block.fan_out;
        let n = hc.input.rows();
        let da: Vec<f64> = dh
            .iter()
            .zip(&hc.pre_act)
            .map(|(d, &p)| d * act.derivative(p))
            .collect();
        let dz = match (&block.gamma, &block.beta, &hc.xhat, &hc.inv_std) {
            (Some(g), Some(bt), Some(xhat), Some(inv_std)) => {
                let gamma = &net.params[g.clone()];
                let mut dgamma = vec![0.0; fo];
                let mut dbeta = vec![0.0; fo];
                let mut dxhat = vec![0.0; n * fo];
                for i in 0..n {
                    for f in 0..fo {
                        let k = i * fo + f;
                        dgamma[f] += da[k] * xhat[k];
                        dbeta[f] += da[k];
                        dxhat[k] = da[k] * gamma[f];
                    }
                }
                for (dst, v) in grad[g.clone()].iter_mut().zip(&dgamma) {
                    *dst += v;
                }
                for (dst, v) in grad[bt.clone()].iter_mut().zip(&dbeta) {
                    *dst += v;
                }
                match cache.mode {
                    NormMode::EvalRunningStats => dxhat
                        .iter()
                        .enumerate()
                        .map(|(k, d)| d * inv_std[k % fo])
                        .collect(),
                    NormMode::TrainBatchStats => {
                        // statistics depend on every row of the batch
                        let nf = n as f64;
                        let mut sum_d = vec![0.0; fo];
                        let mut sum_dx = vec![0.0; fo];
                        for i in 0..n {
                            for f in 0..fo {
                                let k = i * fo + f;
                                sum_d[f] += dxhat[k];
                                sum_dx[f] += dxhat[k] * xhat[k];
                            }
                        }
                        let mut dz = vec![0.0; n * fo];
                        for i in 0..n {
                            for f in 0..fo {
                                let k = i * fo + f;
                                dz[k] = inv_std[f] / nf
                                    * (nf * dxhat[k] - sum_d[f] - xhat[k] * sum_dx[f]);
                            }
                        }
                        dz
                    }
                }
            }
            _ => da,
        };
        ensure_finite(&dz, li)?;
        let (head, _) = grad.split_at_mut(block.bias.end);
        let (gw, gb) = head[block.weight.start..].split_at_mut(block.weight.len());
        dh = linear_backward(
            &hc.input,
            &dz,
            &net.params[block.weight.clone()],
            fo,
            gw,
            gb,
        );
        ensure_finite(&dh, li)?;
    }
    Ok((grad, dh))
}

/// Loss value and `dloss/dlogits` for the single-batch heads.
fn head_terms(logits: &Batch, head: LossHead<'_>) -> Result<(f64, Vec<f64>), NetError> {
    let n = logits.rows() as f64;
    let k = logits.cols();
    let mut loss = 0.0;
    let mut d = Vec::with_capacity(logits.rows() * k);
    match head {
        LossHead::MeanEnergy => {
            for z in logits.iter_rows() {
                loss -= logsumexp(z);
                d.extend(softmax(z).into_iter().map(|p| -p / n));
            }
        }
        LossHead::MeanEntropy => {
            for z in logits.iter_rows() {
                let lse = logsumexp(z);
                let logp: Vec<f64> = z.iter().map(|v| v - lse).collect();
                let h: f64 = -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
                loss += h;
                d.extend(logp.iter().map(|lp| -lp.exp() * (lp + h) / n));
            }
        }
        LossHead::CrossEntropy { labels } => {
            if labels.len() != logits.rows() {
                return Err(NetError::DimensionMismatch {
                    expected: logits.rows(),
                    got: labels.len(),
                });
            }
            for (z, &y) in logits.iter_rows().zip(labels) {
                if y >= k {
                    return Err(NetError::ClassIndex {
                        index: y,
                        classes: k,
                    });
                }
                let p = softmax(z);
                loss += logsumexp(z) - z[y];
                d.extend(
                    p.iter()
                        .enumerate()
                        .map(|(j, pj)| (pj - if j == y { 1.0 } else { 0.0 }) / n),
                );
            }
        }
        LossHead::ContrastiveDivergence { .. } => unreachable!("handled by caller"),
    }
    Ok((loss / n, d))
}

fn single_head(
    net: &ParamNet,
    x: &Batch,
    head: LossHead<'_>,
    mode: NormMode,
) -> Result<(f64, Vec<f64>), NetError> {
    if x.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let cache = forward_cached(net, x, mode)?;
    let (loss, dlogits) = head_terms(&cache.logits, head)?;
    if !loss.is_finite() {
        return Err(NetError::NonFinite {
            layer: net.spec.hidden_dims.len(),
        });
    }
    let (g, _) = backward(net, &cache, &dlogits)?;
    Ok((loss, g))
}

/// Loss value and its exact gradient with respect to the parameter vector.
pub fn value_and_grad_params(
    net: &ParamNet,
    x: &Batch,
    head: LossHead<'_>,
    mode: NormMode,
) -> Result<(f64, Vec<f64>), NetError> {
    match head {
        LossHead::ContrastiveDivergence { negatives } => {
            let (lp, gp) = single_head(net, x, LossHead::MeanEnergy, mode)?;
            let (ln, gn) = single_head(net, negatives, LossHead::MeanEnergy, mode)?;
            let g = gp.iter().zip(&gn).map(|(a, b)| a - b).collect();
            Ok((lp - ln, g))
        }
        _ => single_head(net, x, head, mode),
    }
}

pub fn grad_params(
    net: &ParamNet,
    x: &Batch,
    head: LossHead<'_>,
    mode: NormMode,
) -> Result<Vec<f64>, NetError> {
    value_and_grad_params(net, x, head, mode).map(|(_, g)| g)
}

/// Per-row energies `-logsumexp(f(x_i))` and the gradient of their sum with
/// respect to the input rows. In eval mode rows are independent, so row `i` of
/// the result is exactly `dE(x_i)/dx_i`.
pub fn grad_input(
    net: &ParamNet,
    x: &Batch,
    mode: NormMode,
) -> Result<(Vec<f64>, Batch), NetError> {
    let cache = forward_cached(net, x, mode)?;
    let mut energies = Vec::with_capacity(x.rows());
    let mut dlogits = Vec::with_capacity(cache.logits.as_slice().len());
    for z in cache.logits.iter_rows() {
        energies.push(-logsumexp(z));
        dlogits.extend(softmax(z).into_iter().map(|p| -p));
    }
    let (_, dx) = backward(net, &cache, &dlogits)?;
    ensure_finite(&dx, 0)?;
    Ok((
        energies,
        Batch::from_vec(x.rows(), x.cols(), dx).expect("input gradient shape"),
    ))
}
