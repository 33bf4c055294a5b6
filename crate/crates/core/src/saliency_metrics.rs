//! Consistency metrics between a predicted saliency map and human ground
//! truth: AUC, NSS, CC, SIM and KLD.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::agreement::{pearson, AgreementError};
use crate::model::ItemId;
use crate::saliency::{FixationMap, SaliencyMap};

/// Added to the predicted mass inside the KLD logarithm.
pub const DEFAULT_KLD_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("map sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),

    #[error("AUC needs at least one fixation and one non-fixation pixel")]
    DegenerateRoc,

    #[error("ground truth has no fixations")]
    NoFixations,

    #[error("predicted map is constant")]
    ZeroVariance,

    #[error("{0} map is constant")]
    ConstantMap(&'static str),

    #[error("{0} map has no positive mass")]
    ZeroSum(&'static str),

    #[error("{0} map has negative values")]
    Negative(&'static str),

    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
}

fn same_dims(a: (u32, u32), b: (u32, u32)) -> Result<(), MetricError> {
    if a == b {
        Ok(())
    } else {
        Err(MetricError::DimensionMismatch(a, b))
    }
}

/// Fixation-based ROC area.
///
/// Fixation pixels are positives and every other pixel a negative. The ROC
/// is traced at every distinct predicted value and integrated with the
/// trapezoid rule, so a positive and a negative sharing a value count half.
/// The area is accumulated as an integer count and divided once.
pub fn auc_judd(pred: &SaliencyMap, fix: &FixationMap) -> Result<f64, MetricError> {
    same_dims(pred.dims(), (fix.width(), fix.height()))?;
    let mut cells: Vec<(f64, bool)> = pred.data().iter().zip(fix.cells()).map(|(v, f)| (*v, *f != 0)).collect();
    let positives = cells.iter().filter(|c| c.1).count() as u128;
    let negatives = cells.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::DegenerateRoc);
    }
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut tp: u128 = 0;
    let mut doubled_area: u128 = 0;
    let mut i = 0;
    while i < cells.len() {
        let value = cells[i].0;
        let (mut pos, mut neg) = (0u128, 0u128);
        while i < cells.len() && cells[i].0 == value {
            if cells[i].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        doubled_area += neg * (2 * tp + pos);
        tp += pos;
    }
    Ok(doubled_area as f64 / (2 * positives * negatives) as f64)
}

/// Standard deviation used to standardize maps for NSS.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdDevMode {
    /// 1/N normalization.
    #[default]
    Population,
    /// 1/(N-1) normalization.
    Sample,
}

/// Mean of the standardized predicted map over fixated pixels.
pub fn nss(pred: &SaliencyMap, fix: &FixationMap) -> Result<f64, MetricError> {
    nss_with(pred, fix, StdDevMode::Population)
}

pub fn nss_with(pred: &SaliencyMap, fix: &FixationMap, mode: StdDevMode) -> Result<f64, MetricError> {
    same_dims(pred.dims(), (fix.width(), fix.height()))?;
    let count = fix.count();
    if count == 0 {
        return Err(MetricError::NoFixations);
    }
    let values = pred.data();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let denom = match mode {
        StdDevMode::Population => n,
        StdDevMode::Sample => (n - 1.0).max(1.0),
    };
    let sd = (ss / denom).sqrt();
    if !(sd > 0.0) {
        return Err(MetricError::ZeroVariance);
    }
    let total: f64 = values
        .iter()
        .zip(fix.cells())
        .filter(|(_, f)| **f != 0)
        .map(|(v, _)| (v - mean) / sd)
        .sum();
    Ok(total / count as f64)
}

/// Pearson correlation of the two flattened maps.
pub fn cc(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64, MetricError> {
    same_dims(pred.dims(), gt.dims())?;
    pearson(gt.data(), pred.data()).map_err(|e| match e {
        AgreementError::Constant("ground-truth") => MetricError::ConstantMap("ground-truth"),
        _ => MetricError::ConstantMap("predicted"),
    })
}

pub(crate) fn sum_normalized(values: &[f64], which: &'static str) -> Result<Vec<f64>, MetricError> {
    if values.iter().any(|v| *v < 0.0) {
        return Err(MetricError::Negative(which));
    }
    let total: f64 = values.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(MetricError::ZeroSum(which));
    }
    Ok(values.iter().map(|v| v / total).collect())
}

/// Histogram intersection of the two sum-normalized maps.
pub fn sim(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64, MetricError> {
    same_dims(pred.dims(), gt.dims())?;
    let p = sum_normalized(pred.data(), "predicted")?;
    let g = sum_normalized(gt.data(), "ground-truth")?;
    let s: f64 = p.iter().zip(&g).map(|(a, b)| a.min(*b)).sum();
    Ok(s.clamp(0.0, 1.0))
}

/// Which distribution plays the reference role in KLD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldDirection {
    /// KL(ground truth || prediction).
    #[default]
    GtToPred,
    /// KL(prediction || ground truth).
    PredToGt,
}

impl fmt::Display for KldDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KldDirection::GtToPred => "gt||pred",
            KldDirection::PredToGt => "pred||gt",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KldConfig {
    pub direction: KldDirection,
    pub epsilon: f64,
}

impl Default for KldConfig {
    fn default() -> Self {
        KldConfig {
            direction: KldDirection::GtToPred,
            epsilon: DEFAULT_KLD_EPSILON,
        }
    }
}

/// `sum p ln(p / (q + eps))` over cells with `p > 0`, in nats, floored at
/// zero (the epsilon can push identical distributions marginally negative).
pub(crate) fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let d: f64 = p
        .iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / (b + eps)).ln())
        .sum();
    d.max(0.0)
}

/// Kullback-Leibler divergence between the sum-normalized maps.
pub fn kld(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64, MetricError> {
    kld_with(pred, gt, KldConfig::default())
}

pub fn kld_with(pred: &SaliencyMap, gt: &SaliencyMap, cfg: KldConfig) -> Result<f64, MetricError> {
    same_dims(pred.dims(), gt.dims())?;
    if !(cfg.epsilon > 0.0) || !cfg.epsilon.is_finite() {
        return Err(MetricError::InvalidEpsilon(cfg.epsilon));
    }
    let p = sum_normalized(pred.data(), "predicted")?;
    let g = sum_normalized(gt.data(), "ground-truth")?;
    Ok(match cfg.direction {
        KldDirection::GtToPred => kl_divergence(&g, &p, cfg.epsilon),
        KldDirection::PredToGt => kl_divergence(&p, &g, cfg.epsilon),
    })
}

/// Numeric conventions applied by [`evaluate_pair`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMetricConfig {
    pub nss_std: StdDevMode,
    pub kld: KldConfig,
}

impl SaliencyMetricConfig {
    /// One-line description of the conventions, for report headers.
    pub fn describe(&self) -> String {
        format!(
            "auc=judd nss_std={} kld={} kld_eps={:e} log=natural",
            match self.nss_std {
                StdDevMode::Population => "population",
                StdDevMode::Sample => "sample",
            },
            self.kld.direction,
            self.kld.epsilon
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub auc: f64,
    pub nss: f64,
    pub cc: f64,
    pub sim: f64,
    pub kld: f64,
}

impl SaliencyScores {
    pub fn mean(scores: &[SaliencyScores]) -> Option<SaliencyScores> {
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        let sum = |f: fn(&SaliencyScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        Some(SaliencyScores {
            auc: sum(|s| s.auc),
            nss: sum(|s| s.nss),
            cc: sum(|s| s.cc),
            sim: sum(|s| s.sim),
            kld: sum(|s| s.kld),
        })
    }
}

/// All five metrics for one item.
pub fn evaluate_pair(
    pred: &SaliencyMap,
    gt_map: &SaliencyMap,
    gt_fix: &FixationMap,
    cfg: &SaliencyMetricConfig,
) -> Result<SaliencyScores, MetricError> {
    Ok(SaliencyScores {
        auc: auc_judd(pred, gt_fix)?,
        nss: nss_with(pred, gt_fix, cfg.nss_std)?,
        cc: cc(pred, gt_map)?,
        sim: sim(pred, gt_map)?,
        kld: kld_with(pred, gt_map, cfg.kld)?,
    })
}

/// Per-item CSV `item_id,auc,nss,cc,sim,kld` with a trailing `mean` row and
/// a leading `#` line recording the conventions used.
pub fn write_item_csv(
    mut w: impl Write,
    rows: &[(ItemId, SaliencyScores)],
    cfg: &SaliencyMetricConfig,
) -> std::io::Result<()> {
    writeln!(w, "# {}", cfg.describe())?;
    writeln!(w, "item_id,auc,nss,cc,sim,kld")?;
    for (id, s) in rows {
        writeln!(w, "{},{},{},{},{},{}", id, s.auc, s.nss, s.cc, s.sim, s.kld)?;
    }
    let scores: Vec<_> = rows.iter().map(|r| r.1).collect();
    if let Some(m) = SaliencyScores::mean(&scores) {
        writeln!(w, "mean,{},{},{},{},{}", m.auc, m.nss, m.cc, m.sim, m.kld)?;
    }
    Ok(())
}
