//! Memory-based contrastive loss against a bank of detached classifier rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dim, dot, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.04 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig("tau must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleLoss {
    pub loss: f64,
    /// dL/df
    pub grad: Vec<f64>,
}

/// Softmax of `logits` with the maximum subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

/// `-log softmax_y(<f, m_j> / tau)` and its gradient in `f`.
pub fn contrastive_loss(
    f: &[f64],
    classifiers: &Mat,
    target: usize,
    cfg: &LossConfig,
) -> Result<SampleLoss> {
    let y = classifiers.rows();
    if target >= y {
        return Err(Error::IndexOutOfRange { index: target, len: y });
    }
    check_dim(classifiers.cols(), f.len())?;
    let logits: Vec<f64> = classifiers.row_iter().map(|m| dot(f, m) / cfg.tau).collect();
    let (arg_max, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, l)| if l > best.1 { (j, l) } else { best });
    // The arg-max term contributes exactly 1; summing the rest keeps ln_1p accurate.
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg_max)
        .map(|(_, l)| (l - max).exp())
        .sum();
    let loss = (max - logits[target] + rest.ln_1p()).max(0.0);

    let p = softmax(&logits);
    let mut grad = vec![0.0; f.len()];
    for (j, m) in classifiers.row_iter().enumerate() {
        let w = (p[j] - if j == target { 1.0 } else { 0.0 }) / cfg.tau;
        if w != 0.0 {
            grad.iter_mut().zip(m).for_each(|(g, mk)| *g += w * mk);
        }
    }
    Ok(SampleLoss { loss, grad })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub mean_loss: f64,
    /// Per-sample gradients of that sample's own loss (not divided by batch size).
    pub grads: Vec<Vec<f64>>,
}

/// Mean contrastive loss over `(embedding, target)` pairs.
pub fn batch_loss(
    samples: &[(Vec<f64>, usize)],
    classifiers: &Mat,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    if samples.is_empty() {
        return Err(Error::Invariant("batch_loss called with an empty batch".into()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for (f, y) in samples {
        let s = contrastive_loss(f, classifiers, *y, cfg)?;
        total += s.loss;
        grads.push(s.grad);
    }
    Ok(BatchLoss {
        mean_loss: total / samples.len() as f64,
        grads,
    })
}
