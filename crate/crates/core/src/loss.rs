//! Scalar objectives used to score predictor outputs: L1 (also the MOS
//! regression loss), CC, KL and BCE losses, their weighted sum, and
//! categorical cross-entropy over the five quality levels.

use serde::{Deserialize, Serialize};

use crate::agreement::pearson;
use crate::saliency::SaliencyMap;
use crate::saliency_metrics::{kl_divergence, sum_normalized, MetricError, DEFAULT_KLD_EPSILON};

/// Clip applied to probabilities before taking logarithms.
pub const DEFAULT_LOSS_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0} vs {1} values")]
    ShapeMismatch(usize, usize),

    #[error("loss needs at least one value")]
    Empty,

    #[error("{0} map is constant; CC loss is undefined")]
    Constant(&'static str),

    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error("probabilities must be non-negative and sum to 1 (sum = {sum})")]
    NotSimplex { sum: f64 },

    #[error("label index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },

    #[error("loss weight {name} must be finite and >= 0, got {value}")]
    InvalidWeight { name: &'static str, value: f64 },
}

fn check_shapes(pred: &[f64], gt: &[f64]) -> Result<(), LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::ShapeMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(pred: &[f64], gt: &[f64]) -> Result<f64, LossError> {
    check_shapes(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// `1 - CC`. Lies in `[0, 2]`.
pub fn cc_loss(pred: &[f64], gt: &[f64]) -> Result<f64, LossError> {
    check_shapes(pred, gt)?;
    let r = pearson(gt, pred).map_err(|e| match e {
        crate::agreement::AgreementError::Constant("ground-truth") => LossError::Constant("ground-truth"),
        _ => LossError::Constant("predicted"),
    })?;
    Ok(1.0 - r)
}

/// KL(gt || pred) between the sum-normalized inputs, same convention as the KLD metric.
pub fn kl_loss(pred: &[f64], gt: &[f64]) -> Result<f64, LossError> {
    kl_loss_eps(pred, gt, DEFAULT_KLD_EPSILON)
}

pub fn kl_loss_eps(pred: &[f64], gt: &[f64], eps: f64) -> Result<f64, LossError> {
    check_shapes(pred, gt)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(MetricError::InvalidEpsilon(eps).into());
    }
    let p = sum_normalized(pred, "predicted")?;
    let g = sum_normalized(gt, "ground-truth")?;
    Ok(kl_divergence(&g, &p, eps))
}

/// Mean binary cross-entropy with predictions clipped to `[eps, 1 - eps]`.
pub fn bce_loss(pred: &[f64], gt: &[f64]) -> Result<f64, LossError> {
    bce_loss_eps(pred, gt, DEFAULT_LOSS_EPSILON)
}

pub fn bce_loss_eps(pred: &[f64], gt: &[f64], eps: f64) -> Result<f64, LossError> {
    check_shapes(pred, gt)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Weights of the four saliency loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub cc: f64,
    pub kl: f64,
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            cc: 1.0,
            kl: 1.0,
            bce: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(l1: f64, cc: f64, kl: f64, bce: f64) -> Result<Self, LossError> {
        let w = LossWeights { l1, cc, kl, bce };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [("w1", self.l1), ("w2", self.cc), ("w3", self.kl), ("w4", self.bce)] {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }

    pub fn scaled(&self, by: f64) -> LossWeights {
        LossWeights {
            l1: self.l1 * by,
            cc: self.cc * by,
            kl: self.kl * by,
            bce: self.bce * by,
        }
    }
}

/// The four component values of a saliency loss, before weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l1: f64,
    pub cc: f64,
    pub kl: f64,
    pub bce: f64,
}

impl LossComponents {
    pub fn compute(pred: &[f64], gt: &[f64], eps: f64) -> Result<Self, LossError> {
        Ok(LossComponents {
            l1: l1_loss(pred, gt)?,
            cc: cc_loss(pred, gt)?,
            kl: kl_loss_eps(pred, gt, eps)?,
            bce: bce_loss_eps(pred, gt, eps)?,
        })
    }

    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.l1 * self.l1 + w.cc * self.cc + w.kl * self.kl + w.bce * self.bce
    }
}

/// `w1 L1 + w2 (1 - CC) + w3 KL + w4 BCE` on a predicted and a ground-truth map.
pub fn combined_loss(pred: &SaliencyMap, gt: &SaliencyMap, weights: &LossWeights) -> Result<f64, LossError> {
    combined_loss_eps(pred, gt, weights, DEFAULT_LOSS_EPSILON)
}

pub fn combined_loss_eps(pred: &SaliencyMap, gt: &SaliencyMap, weights: &LossWeights, eps: f64) -> Result<f64, LossError> {
    if pred.dims() != gt.dims() {
        return Err(MetricError::DimensionMismatch(pred.dims(), gt.dims()).into());
    }
    weights.validate()?;
    Ok(LossComponents::compute(pred.data(), gt.data(), eps)?.weighted(weights))
}

/// `-ln(p[label] + eps)` for a probability vector.
pub fn categorical_ce(probs: &[f64], label: usize) -> Result<f64, LossError> {
    categorical_ce_eps(probs, label, DEFAULT_LOSS_EPSILON)
}

pub fn categorical_ce_eps(probs: &[f64], label: usize, eps: f64) -> Result<f64, LossError> {
    if label >= probs.len() {
        return Err(LossError::LabelOutOfRange {
            index: label,
            classes: probs.len(),
        });
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(LossError::NotSimplex { sum });
    }
    Ok(-(probs[label] + eps).ln())
}
