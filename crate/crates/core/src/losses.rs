//! Pairwise logistic ranking loss with tie masking, MSE, and their weighted sum.
//!
//! Losses work in `f64` on plain slices; each returns its value together with
//! the gradient with respect to the predictions.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::softplus;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_rank: f64,
    pub lambda_rank: f64,
    pub lambda_mse: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_rank: 0.5,
            lambda_rank: 1.0,
            lambda_mse: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_rank.is_finite() && self.tau_rank > 0.0) {
            return Err(Error::config(format!("tau_rank must be > 0, got {}", self.tau_rank)));
        }
        if !(self.lambda_rank >= 0.0 && self.lambda_mse >= 0.0) {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if self.lambda_rank == 0.0 && self.lambda_mse == 0.0 {
            return Err(Error::config("lambda_rank and lambda_mse cannot both be zero"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `d value / d prediction`.
    pub grad: Vec<f64>,
    /// Ordered non-tied pairs that contributed to the rank term.
    pub pairs: usize,
}

impl LossOutput {
    /// True when every pair in the batch was tied and the rank term is empty.
    pub fn no_pairs(&self) -> bool {
        self.pairs == 0
    }
}

fn check_lengths(pred: &[f64], target: &[f64], min: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::config(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < min {
        return Err(Error::config(format!("loss needs at least {min} samples")));
    }
    Ok(())
}

/// Mean of `softplus(-s_ij (p_i - p_j) / tau)` over ordered pairs with `y_i != y_j`.
pub fn pairwise_rank_loss(pred: &[f64], target: &[f64], tau_rank: f64) -> Result<LossOutput> {
    check_lengths(pred, target, 2)?;
    let n = pred.len();
    let mut sum = 0.0;
    let mut grad = vec![0.0; n];
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if target[i] == target[j] {
                continue;
            }
            let sign = if target[i] > target[j] { 1.0 } else { -1.0 };
            let x = -sign * (pred[i] - pred[j]) / tau_rank;
            sum += softplus(x);
            // d softplus(x)/dx = sigmoid(x)
            let dx = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            };
            let g = -sign * dx / tau_rank;
            grad[i] += g;
            grad[j] -= g;
            pairs += 1;
        }
    }
    if pairs == 0 {
        debug!("rank loss: all {n} targets tied, no pairs");
        return Ok(LossOutput {
            value: 0.0,
            grad,
            pairs,
        });
    }
    let inv = 1.0 / pairs as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossOutput {
        value: sum * inv,
        grad,
        pairs,
    })
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<LossOutput> {
    check_lengths(pred, target, 1)?;
    let n = pred.len() as f64;
    let value = pred
        .iter()
        .zip(target)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / n;
    let grad = pred.iter().zip(target).map(|(p, y)| 2.0 * (p - y) / n).collect();
    Ok(LossOutput {
        value,
        grad,
        pairs: 0,
    })
}

/// `lambda_rank * L_rank + lambda_mse * L_mse`. A zero weight skips its term entirely.
pub fn total_loss(pred: &[f64], target: &[f64], cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let mut out = LossOutput {
        value: 0.0,
        grad: vec![0.0; pred.len()],
        pairs: 0,
    };
    if cfg.lambda_rank > 0.0 {
        let rank = pairwise_rank_loss(pred, target, cfg.tau_rank)?;
        out.value += cfg.lambda_rank * rank.value;
        for (g, r) in out.grad.iter_mut().zip(&rank.grad) {
            *g += cfg.lambda_rank * r;
        }
        out.pairs = rank.pairs;
    }
    if cfg.lambda_mse > 0.0 {
        let mse = mse_loss(pred, target)?;
        out.value += cfg.lambda_mse * mse.value;
        for (g, m) in out.grad.iter_mut().zip(&mse.grad) {
            *g += cfg.lambda_mse * m;
        }
    }
    Ok(out)
}
