//! Agreement between predicted and ground-truth scores: SRCC, PLCC, KRCC,
//! plus accuracy for the distortion-category question.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::DistortionCategory;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgreementError {
    #[error("length mismatch: {truth} ground-truth values vs {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },

    #[error("need at least 2 paired values, got {0}")]
    TooShort(usize),

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("{0} vector is constant; correlation is undefined")]
    Constant(&'static str),

    #[error("need at least one item to compute accuracy")]
    Empty,
}

/// Ground truth and predictions for the same items, in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedScores {
    truth: Vec<f64>,
    predicted: Vec<f64>,
}

impl PairedScores {
    pub fn new(truth: Vec<f64>, predicted: Vec<f64>) -> Result<Self, AgreementError> {
        if truth.len() != predicted.len() {
            return Err(AgreementError::LengthMismatch {
                truth: truth.len(),
                predicted: predicted.len(),
            });
        }
        if truth.len() < 2 {
            return Err(AgreementError::TooShort(truth.len()));
        }
        if let Some(i) = truth.iter().zip(&predicted).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(AgreementError::NonFinite(i));
        }
        Ok(PairedScores { truth, predicted })
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// 1-based ranks; tied values share the average of their positions.
pub fn rank(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of two equal-length vectors.
pub(crate) fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AgreementError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(AgreementError::Constant("ground-truth"));
    }
    if syy == 0.0 {
        return Err(AgreementError::Constant("predicted"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn has_ties(values: &[f64]) -> bool {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).any(|w| w[0] == w[1])
}

fn check_not_constant(p: &PairedScores) -> Result<(), AgreementError> {
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(&p.truth) {
        return Err(AgreementError::Constant("ground-truth"));
    }
    if constant(&p.predicted) {
        return Err(AgreementError::Constant("predicted"));
    }
    Ok(())
}

/// Spearman rank-order correlation: Pearson correlation of the tie-averaged
/// ranks, which reduces to the `1 - 6 sum d^2 / (N (N^2 - 1))` form without ties.
pub fn srcc(p: &PairedScores) -> Result<f64, AgreementError> {
    check_not_constant(p)?;
    pearson(&rank(&p.truth), &rank(&p.predicted))
}

/// The squared-rank-difference formula. Exact only for tie-free input;
/// returns `None` when either vector has ties.
pub fn srcc_closed_form(p: &PairedScores) -> Option<f64> {
    if has_ties(&p.truth) || has_ties(&p.predicted) {
        return None;
    }
    let v = rank(&p.truth);
    let q = rank(&p.predicted);
    let d2: f64 = v.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = p.len() as f64;
    Some(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Pearson linear correlation between predictions and ground truth.
pub fn plcc(p: &PairedScores) -> Result<f64, AgreementError> {
    check_not_constant(p)?;
    pearson(&p.truth, &p.predicted)
}

/// Kendall's tau-a: `(C - D) / (N (N - 1) / 2)`. A pair tied in either
/// vector is neither concordant nor discordant.
///
/// Runs in `O(N log N)`: pairs are sorted by ground truth (then prediction)
/// and discordant pairs counted as merge-sort inversions.
pub fn krcc(p: &PairedScores) -> f64 {
    let n = p.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        p.truth[a]
            .total_cmp(&p.truth[b])
            .then(p.predicted[a].total_cmp(&p.predicted[b]))
    });
    let xs: Vec<f64> = idx.iter().map(|&i| p.truth[i]).collect();
    let mut ys: Vec<f64> = idx.iter().map(|&i| p.predicted[i]).collect();

    let tied_pairs = |sorted: &[f64]| -> u64 {
        let mut total = 0u64;
        let mut run = 1u64;
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };

    let ties_x = tied_pairs(&xs);
    let mut joint = 0u64;
    let mut run = 1u64;
    for i in 1..n {
        if xs[i] == xs[i - 1] && ys[i] == ys[i - 1] {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    joint += run * (run - 1) / 2;

    let discordant = count_inversions(&mut ys);
    let ties_y = tied_pairs(&ys);

    let total = (n as u64) * (n as u64 - 1) / 2;
    let decided = total + joint - ties_x - ties_y;
    let concordant = decided - discordant;
    (concordant as f64 - discordant as f64) / total as f64
}

/// Sorts `v` ascending and returns the number of strictly inverted pairs.
fn count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            count += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    count
}

/// Scoring rule for multi-label category answers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// An answer counts only when the predicted set equals the true set.
    #[default]
    ExactMatch,
    /// Mean intersection-over-union of the two sets.
    Jaccard,
}

impl fmt::Display for AccuracyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccuracyMode::ExactMatch => "exact_match",
            AccuracyMode::Jaccard => "jaccard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaAccuracy {
    pub value: f64,
    pub mode: AccuracyMode,
    pub n_items: usize,
}

/// Average accuracy over items. Two empty sets agree perfectly.
pub fn qa_accuracy(
    truth: &[BTreeSet<DistortionCategory>],
    predicted: &[BTreeSet<DistortionCategory>],
    mode: AccuracyMode,
) -> Result<QaAccuracy, AgreementError> {
    if truth.len() != predicted.len() {
        return Err(AgreementError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(AgreementError::Empty);
    }
    let total: f64 = truth
        .iter()
        .zip(predicted)
        .map(|(t, p)| match mode {
            AccuracyMode::ExactMatch => (t == p) as u8 as f64,
            AccuracyMode::Jaccard => {
                let union = t.union(p).count();
                if union == 0 {
                    1.0
                } else {
                    t.intersection(p).count() as f64 / union as f64
                }
            }
        })
        .sum();
    Ok(QaAccuracy {
        value: total / truth.len() as f64,
        mode,
        n_items: truth.len(),
    })
}
