//! Losses, the magnitude regularizers and ADAM.

use thiserror::Error;

use crate::cells::Network;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("bits-per-character needs a positive symbol count")]
    ZeroCount,
    #[error("non-finite gradient {value} in {tensor}[{index}]; update skipped")]
    NonFiniteGradient {
        tensor: String,
        index: usize,
        value: f64,
    },
    #[error("gradient shape does not match parameters at {0}")]
    ShapeMismatch(String),
}

/// Stable softmax cross-entropy. Returns the loss in nats and
/// `softmax(logits) - onehot(target)`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>), OptimError> {
    if target >= logits.len() {
        return Err(OptimError::TargetOutOfRange {
            index: target,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    let log_sum = sum.ln();
    let loss = log_sum - (logits[target] - max);
    probs.iter_mut().for_each(|p| *p /= sum);
    probs[target] -= 1.0;
    Ok((loss, probs))
}

/// Softmax cross-entropy loss only (no gradient), for evaluation loops.
pub fn xent_loss(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    sum.ln() - (logits[target] - max)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Bits per character from a total cross-entropy in nats.
pub fn bpc(total_nats: f64, count: usize) -> Result<f64, OptimError> {
    if count == 0 {
        return Err(OptimError::ZeroCount);
    }
    Ok(total_nats / count as f64 / std::f64::consts::LN_2)
}

/// Coefficients of the magnitude penalties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    /// Memory-cell penalty coefficient.
    pub eta: f64,
    /// Weight penalty coefficient.
    pub eta_w: f64,
}

impl RegConfig {
    pub const NONE: RegConfig = RegConfig { eta: 0.0, eta_w: 0.0 };

    pub fn new(eta: f64) -> Self {
        Self { eta, eta_w: eta }
    }
}

impl Default for RegConfig {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

/// `η·(m² + m)` where `m = mean(|v|)` is the square of the mean absolute
/// value, not the mean square. Returns the value and `∂/∂m`.
#[inline]
pub fn abs_mean_penalty(mean_abs: f64, eta: f64) -> (f64, f64) {
    (eta * (mean_abs * mean_abs + mean_abs), eta * (2.0 * mean_abs + 1.0))
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Memory-cell penalty for one vector of cells and its gradient.
pub fn cell_penalty(c: &[f64], eta: f64) -> (f64, Vec<f64>) {
    if c.is_empty() {
        return (0.0, Vec::new());
    }
    let n = c.len() as f64;
    let m = c.iter().map(|v| v.abs()).sum::<f64>() / n;
    let (value, dm) = abs_mean_penalty(m, eta);
    let grad = c.iter().map(|&v| dm * sign(v) / n).collect();
    (value, grad)
}

/// The same functional applied to every non-bias tensor, summed. Returns the
/// penalty and a gradient network (zero on biases).
pub fn weight_penalty(net: &Network, eta_w: f64) -> (f64, Network) {
    let mut grads = net.zeros_like();
    let mut total = 0.0;
    if eta_w == 0.0 {
        return (0.0, grads);
    }
    for (p, g) in net.tensors().iter().zip(grads.tensors_mut()) {
        if p.is_bias || p.values.is_empty() {
            continue;
        }
        let (value, dp) = cell_penalty(p.values, eta_w);
        total += value;
        g.values.copy_from_slice(&dp);
    }
    (total, grads)
}

/// Hyperparameters of ADAM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per tensor, in [`Network::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, net: &Network) -> Self {
        let shapes: Vec<usize> = net.tensors().iter().map(|t| t.values.len()).collect();
        Self {
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected ADAM update. A non-finite gradient anywhere leaves
    /// both the parameters and the state untouched.
    pub fn step(&mut self, params: &mut Network, grads: &Network) -> Result<(), OptimError> {
        let gs = grads.tensors();
        let mut ps = params.tensors_mut();
        if gs.len() != ps.len() || gs.len() != self.m.len() {
            return Err(OptimError::ShapeMismatch("tensor count".into()));
        }
        for (p, g) in ps.iter().zip(&gs) {
            if p.values.len() != g.values.len() {
                return Err(OptimError::ShapeMismatch(p.name.clone()));
            }
            if let Some((index, &value)) = g.values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    tensor: g.name.clone(),
                    index,
                    value,
                });
            }
        }
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, (p, g)) in ps.iter_mut().zip(&gs).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.values.len() {
                let gi = g.values[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= alpha * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
