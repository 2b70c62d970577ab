//! Per-channel batch normalization over `(batch, height, width)`.

use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.1;

pub struct NormTrace {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = x.shape();
    let count = (n * x.plane_len()) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let m: f64 = (0..n).map(|b| x.plane(b, ch).iter().sum::<f64>()).sum::<f64>() / count;
        let v: f64 = (0..n)
            .map(|b| x.plane(b, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
            .sum::<f64>()
            / count;
        mean[ch] = m;
        var[ch] = v;
    }
    (mean, var)
}

fn affine(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> (Tensor, Tensor) {
    let [n, c, _, _] = x.shape();
    let mut normalized = x.clone();
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let nrm = normalized.plane_mut(b, ch);
            for (d, s) in nrm.iter_mut().zip(src) {
                *d = (s - mean[ch]) * inv_std[ch];
            }
            let nrm = normalized.plane(b, ch).to_vec();
            for (d, s) in out.plane_mut(b, ch).iter_mut().zip(&nrm) {
                *d = gamma[ch] * s + beta[ch];
            }
        }
    }
    (out, normalized)
}

/// Normalizes with the batch's own statistics.
pub fn forward_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, NormTrace) {
    let (mean, var) = channel_stats(x);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
    let (out, normalized) = affine(x, &mean, &inv_std, gamma, beta);
    (
        out,
        NormTrace {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

/// Normalizes with stored running statistics.
pub fn forward_eval(x: &Tensor, gamma: &[f64], beta: &[f64], running_mean: &[f64], running_var: &[f64]) -> Tensor {
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
    affine(x, running_mean, &inv_std, gamma, beta).0
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn backward(trace: &NormTrace, gamma: &[f64], grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = grad_out.shape();
    let count = (n * grad_out.plane_len()) as f64;
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for ch in 0..c {
        for b in 0..n {
            let go = grad_out.plane(b, ch);
            let xn = trace.normalized.plane(b, ch);
            g_beta[ch] += go.iter().sum::<f64>();
            g_gamma[ch] += go.iter().zip(xn).map(|(g, x)| g * x).sum::<f64>();
        }
    }
    let mut g_in = grad_out.clone();
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * trace.inv_std[ch] / count;
            let xn = trace.normalized.plane(b, ch).to_vec();
            let go = grad_out.plane(b, ch).to_vec();
            for ((d, g), x) in g_in.plane_mut(b, ch).iter_mut().zip(&go).zip(&xn) {
                *d = k * (count * g - g_beta[ch] - x * g_gamma[ch]);
            }
        }
    }
    (g_in, g_gamma, g_beta)
}

/// Exponential moving update of running statistics.
pub fn update_running(running: &mut [f64], batch: &[f64]) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b;
    }
}
