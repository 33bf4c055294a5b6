//! Raw slider ratings to Mean Opinion Scores.
//!
//! Each subject's ratings on a dimension are converted to Z-scores with that
//! subject's own mean and sample standard deviation, mapped linearly from
//! `[-3, 3]` onto `[0, 100]` (values beyond are clamped and reported), and
//! averaged per item over the subjects that survive screening.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::model::{Dimension, ItemId, QualityLevel, RatingKey, RatingRecord};

#[derive(Debug, thiserror::Error)]
pub enum MosError {
    #[error("subject {subject} has zero rating variance on {dimension}; screen such subjects first")]
    ZeroVariance { subject: String, dimension: Dimension },

    #[error("no retained subject rated: {}", format_uncovered(.0))]
    UncoveredItems(Vec<(ItemId, Dimension)>),

    #[error("duplicate rating for subject {} on item {} ({})", .0.subject_id, .0.item_id, .0.dimension)]
    DuplicateRating(RatingKey),

    #[error("score {score} outside [0, 5] for subject {subject} on item {item}")]
    ScoreOutOfRange { subject: String, item: ItemId, score: f64 },

    #[error("quality level needs m < M, got m={min} M={max}")]
    EmptyRange { min: f64, max: f64 },

    #[error("score {score} outside [{min}, {max}]")]
    LevelOutOfRange { score: f64, min: f64, max: f64 },

    #[error("invalid screening parameter: {0}")]
    InvalidPolicy(String),

    #[error("MOS csv line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_uncovered(items: &[(ItemId, Dimension)]) -> String {
    items.iter().map(|(i, d)| format!("{i}/{d}")).collect::<Vec<_>>().join(", ")
}

/// Per-subject, per-dimension rating statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectStats {
    pub subject_id: String,
    pub dimension: Dimension,
    pub mean: f64,
    /// Sample standard deviation (N-1 denominator). Zero when `degenerate`.
    pub stddev: f64,
    pub count: usize,
    /// Fewer than two ratings, so the standard deviation is undefined.
    pub degenerate: bool,
}

fn group_by_subject(records: &[RatingRecord]) -> BTreeMap<(&str, Dimension), Vec<f64>> {
    let mut groups: BTreeMap<(&str, Dimension), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.subject_id.as_str(), r.dimension)).or_default().push(r.score);
    }
    groups
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_stddev(values: &[f64], mean: f64) -> f64 {
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Mean and sample standard deviation of each subject's ratings, one entry
/// per (subject, dimension), sorted by subject then dimension.
pub fn subject_stats(records: &[RatingRecord]) -> Vec<SubjectStats> {
    group_by_subject(records)
        .into_iter()
        .map(|((subject, dimension), scores)| {
            let m = mean(&scores);
            let degenerate = scores.len() < 2;
            // identical scores must give exactly zero, whatever the rounding in `m`
            let constant = scores.iter().all(|s| *s == scores[0]);
            SubjectStats {
                subject_id: subject.to_owned(),
                dimension,
                mean: if constant { scores[0] } else { m },
                stddev: if degenerate || constant { 0.0 } else { sample_stddev(&scores, m) },
                count: scores.len(),
                degenerate,
            }
        })
        .collect()
}

/// Unscaled Z-score of one rating against its subject's statistics.
pub fn zscore(score: f64, stats: &SubjectStats) -> Result<f64, MosError> {
    if stats.degenerate || !(stats.stddev > 0.0) {
        return Err(MosError::ZeroVariance {
            subject: stats.subject_id.clone(),
            dimension: stats.dimension,
        });
    }
    Ok((score - stats.mean) / stats.stddev)
}

/// Maps a Z-score onto `[0, 100]`; the flag is set when clamping occurred.
pub fn rescale_z(z: f64) -> (f64, bool) {
    let v = 100.0 * (z + 3.0) / 6.0;
    if v < 0.0 {
        (0.0, true)
    } else if v > 100.0 {
        (100.0, true)
    } else {
        (v, false)
    }
}

/// Z-score of `record` rescaled to `[0, 100]`.
pub fn zscore_rescale(record: &RatingRecord, stats: &SubjectStats) -> Result<f64, MosError> {
    zscore(record.score, stats).map(|z| rescale_z(z).0)
}

/// How unreliable subjects are detected before aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScreeningPolicy {
    /// Keep every subject with a usable variance.
    None,
    /// A rating is an outlier when it lies more than `k` per-item standard
    /// deviations from the item mean; a subject is rejected when more than
    /// `max_outlier_fraction` of their ratings are outliers.
    StdDevOutlier { k: f64, max_outlier_fraction: f64 },
    /// Kurtosis-aware screening: `2s` bounds for normally distributed items
    /// (2 <= beta2 <= 4), `sqrt(20) s` otherwise; rejection needs
    /// `(P+Q)/N > reject_fraction` and `|P-Q|/(P+Q) < balance`.
    ItuAnnex2 { reject_fraction: f64, balance: f64 },
}

impl ScreeningPolicy {
    pub fn std_dev_outlier() -> Self {
        ScreeningPolicy::StdDevOutlier {
            k: 2.0,
            max_outlier_fraction: 0.05,
        }
    }

    pub fn itu_annex2() -> Self {
        ScreeningPolicy::ItuAnnex2 {
            reject_fraction: 0.05,
            balance: 0.3,
        }
    }

    pub fn validate(&self) -> Result<(), MosError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(MosError::InvalidPolicy(format!("{name} must be a positive number, got {v}")))
            }
        };
        match *self {
            ScreeningPolicy::None => Ok(()),
            ScreeningPolicy::StdDevOutlier { k, max_outlier_fraction } => {
                positive("k", k)?;
                positive("max_outlier_fraction", max_outlier_fraction)
            }
            ScreeningPolicy::ItuAnnex2 { reject_fraction, balance } => {
                positive("reject_fraction", reject_fraction)?;
                positive("balance", balance)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScreeningPolicy::None => "none",
            ScreeningPolicy::StdDevOutlier { .. } => "stddev",
            ScreeningPolicy::ItuAnnex2 { .. } => "itu",
        }
    }
}

impl Default for ScreeningPolicy {
    fn default() -> Self {
        ScreeningPolicy::itu_annex2()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum RejectionReason {
    DegenerateVariance { dimension: Dimension },
    InsufficientRatings { dimension: Dimension, count: usize },
    Outliers { dimension: Dimension, outliers: usize, total: usize },
    ItuAnnex2 { dimension: Dimension, above: usize, below: usize, total: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScreeningOutcome {
    pub retained: BTreeSet<String>,
    pub rejected: BTreeMap<String, Vec<RejectionReason>>,
}

struct ItemMoments {
    mean: f64,
    stddev: f64,
    kurtosis: f64,
}

fn item_moments(records: &[RatingRecord], dimension: Dimension) -> BTreeMap<&ItemId, ItemMoments> {
    let mut by_item: BTreeMap<&ItemId, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.dimension == dimension) {
        by_item.entry(&r.item_id).or_default().push(r.score);
    }
    by_item
        .into_iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(item, v)| {
            let m = mean(&v);
            let n = v.len() as f64;
            let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
            let kurtosis = if m2 > 0.0 { m4 / (m2 * m2) } else { 0.0 };
            (
                item,
                ItemMoments {
                    mean: m,
                    stddev: sample_stddev(&v, m),
                    kurtosis,
                },
            )
        })
        .collect()
}

/// Decides which subjects contribute to the MOS.
///
/// Subjects whose ratings on some dimension have zero variance, or who rated
/// fewer than two items on it, are rejected under every policy because their
/// Z-scores are undefined.
pub fn screen_subjects(records: &[RatingRecord], policy: &ScreeningPolicy) -> ScreeningOutcome {
    let mut outcome = ScreeningOutcome::default();
    let mut reasons: BTreeMap<String, Vec<RejectionReason>> = BTreeMap::new();

    for s in subject_stats(records) {
        reasons.entry(s.subject_id.clone()).or_default();
        if s.degenerate {
            reasons.get_mut(&s.subject_id).unwrap().push(RejectionReason::InsufficientRatings {
                dimension: s.dimension,
                count: s.count,
            });
        } else if s.stddev == 0.0 {
            reasons
                .get_mut(&s.subject_id)
                .unwrap()
                .push(RejectionReason::DegenerateVariance { dimension: s.dimension });
        }
    }

    for dimension in Dimension::ALL {
        let moments = item_moments(records, dimension);
        let mut tallies: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.dimension == dimension) {
            let t = tallies.entry(r.subject_id.as_str()).or_default();
            t.2 += 1;
            let Some(m) = moments.get(&r.item_id) else { continue };
            if !(m.stddev > 0.0) {
                continue;
            }
            match *policy {
                ScreeningPolicy::None => {}
                ScreeningPolicy::StdDevOutlier { k, .. } => {
                    if (r.score - m.mean).abs() > k * m.stddev {
                        t.0 += 1;
                    }
                }
                ScreeningPolicy::ItuAnnex2 { .. } => {
                    let width = if (2.0..=4.0).contains(&m.kurtosis) {
                        2.0 * m.stddev
                    } else {
                        20f64.sqrt() * m.stddev
                    };
                    if r.score >= m.mean + width {
                        t.0 += 1;
                    }
                    if r.score <= m.mean - width {
                        t.1 += 1;
                    }
                }
            }
        }

        for (subject, (above, below, total)) in tallies {
            let reject = match *policy {
                ScreeningPolicy::None => None,
                ScreeningPolicy::StdDevOutlier { max_outlier_fraction, .. } => {
                    (above as f64 / total as f64 > max_outlier_fraction).then_some(RejectionReason::Outliers {
                        dimension,
                        outliers: above,
                        total,
                    })
                }
                ScreeningPolicy::ItuAnnex2 { reject_fraction, balance } => {
                    let flagged = (above + below) as f64;
                    (flagged > 0.0
                        && flagged / total as f64 > reject_fraction
                        && (above as f64 - below as f64).abs() / flagged < balance)
                        .then_some(RejectionReason::ItuAnnex2 {
                            dimension,
                            above,
                            below,
                            total,
                        })
                }
            };
            if let Some(reason) = reject {
                reasons.get_mut(subject).unwrap().push(reason);
            }
        }
    }

    for (subject, rs) in reasons {
        if rs.is_empty() {
            outcome.retained.insert(subject);
        } else {
            outcome.rejected.insert(subject, rs);
        }
    }
    outcome
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosEntry {
    pub mos: f64,
    pub n_subjects: usize,
}

/// A rescaled score that fell outside `[0, 100]` before clamping.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClampEvent {
    pub subject_id: String,
    pub item_id: ItemId,
    pub dimension: Dimension,
    pub zscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MosTable {
    pub entries: BTreeMap<(ItemId, Dimension), MosEntry>,
    pub retained_subjects: BTreeSet<String>,
    pub rejection_report: BTreeMap<String, Vec<RejectionReason>>,
    pub clamped: Vec<ClampEvent>,
    pub policy: ScreeningPolicy,
}

#[derive(Serialize)]
struct RejectionReportJson<'a> {
    policy: &'a ScreeningPolicy,
    retained: &'a BTreeSet<String>,
    rejected: &'a BTreeMap<String, Vec<RejectionReason>>,
    clamped: &'a [ClampEvent],
}

/// Screens subjects, then averages the rescaled Z-scores of retained subjects
/// per item and dimension.
pub fn aggregate_mos(records: &[RatingRecord], policy: &ScreeningPolicy) -> Result<MosTable, MosError> {
    policy.validate()?;
    let mut seen = BTreeSet::new();
    for r in records {
        if !r.in_range() {
            return Err(MosError::ScoreOutOfRange {
                subject: r.subject_id.clone(),
                item: r.item_id.clone(),
                score: r.score,
            });
        }
        let key = RatingKey::of(r);
        if !seen.insert(key.clone()) {
            return Err(MosError::DuplicateRating(key));
        }
    }

    let screening = screen_subjects(records, policy);
    let stats: BTreeMap<(String, Dimension), SubjectStats> = subject_stats(records)
        .into_iter()
        .map(|s| ((s.subject_id.clone(), s.dimension), s))
        .collect();

    let mut sums: BTreeMap<(ItemId, Dimension), (f64, usize)> = BTreeMap::new();
    let mut clamped = Vec::new();
    for r in records {
        sums.entry((r.item_id.clone(), r.dimension)).or_insert((0.0, 0));
        if !screening.retained.contains(&r.subject_id) {
            continue;
        }
        let s = &stats[&(r.subject_id.clone(), r.dimension)];
        let z = zscore(r.score, s)?;
        let (v, was_clamped) = rescale_z(z);
        if was_clamped {
            clamped.push(ClampEvent {
                subject_id: r.subject_id.clone(),
                item_id: r.item_id.clone(),
                dimension: r.dimension,
                zscore: z,
            });
        }
        let e = sums.get_mut(&(r.item_id.clone(), r.dimension)).unwrap();
        e.0 += v;
        e.1 += 1;
    }

    let uncovered: Vec<_> = sums.iter().filter(|(_, (_, n))| *n == 0).map(|(k, _)| k.clone()).collect();
    if !uncovered.is_empty() {
        return Err(MosError::UncoveredItems(uncovered));
    }

    let entries = sums
        .into_iter()
        .map(|(k, (sum, n))| {
            (
                k,
                MosEntry {
                    mos: sum / n as f64,
                    n_subjects: n,
                },
            )
        })
        .collect();

    Ok(MosTable {
        entries,
        retained_subjects: screening.retained,
        rejection_report: screening.rejected,
        clamped,
        policy: policy.clone(),
    })
}

impl MosTable {
    pub fn get(&self, item: &ItemId, dimension: Dimension) -> Option<f64> {
        self.entries.get(&(item.clone(), dimension)).map(|e| e.mos)
    }

    /// Items carrying a MOS on `dimension`, in id order.
    pub fn items(&self, dimension: Dimension) -> impl Iterator<Item = (&ItemId, f64)> {
        self.entries
            .iter()
            .filter(move |((_, d), _)| *d == dimension)
            .map(|((i, _), e)| (i, e.mos))
    }

    /// Writes `item_id,dimension,mos,n_subjects` rows in item order.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "item_id,dimension,mos,n_subjects")?;
        for ((item, dim), e) in &self.entries {
            writeln!(w, "{},{},{},{}", item, dim, e.mos, e.n_subjects)?;
        }
        Ok(())
    }

    pub fn write_rejection_report(&self, w: impl Write) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(
            w,
            &RejectionReportJson {
                policy: &self.policy,
                retained: &self.retained_subjects,
                rejected: &self.rejection_report,
                clamped: &self.clamped,
            },
        )
    }

    /// Reads a MOS CSV back. Screening metadata is not part of the file and
    /// comes back empty.
    pub fn read_csv(r: impl BufRead) -> Result<MosTable, MosError> {
        let mut entries = BTreeMap::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if idx == 0 {
                if line.trim() != "item_id,dimension,mos,n_subjects" {
                    return Err(MosError::Csv {
                        line: lineno,
                        message: format!("unexpected header {line:?}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |message: String| MosError::Csv { line: lineno, message };
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", fields.len())));
            }
            let dim: Dimension = fields[1].parse().map_err(|e: crate::model::ModelError| bad(e.to_string()))?;
            let mos: f64 = fields[2].parse().map_err(|_| bad(format!("bad mos {:?}", fields[2])))?;
            let n: usize = fields[3].parse().map_err(|_| bad(format!("bad n_subjects {:?}", fields[3])))?;
            entries.insert((ItemId::new(fields[0]), dim), MosEntry { mos, n_subjects: n });
        }
        Ok(MosTable {
            entries,
            retained_subjects: BTreeSet::new(),
            rejection_report: BTreeMap::new(),
            clamped: Vec::new(),
            policy: ScreeningPolicy::None,
        })
    }
}

/// Assigns one of five equal-width levels over `[min, max]`; each bin is
/// left-open and right-closed, with `min` itself falling into the lowest bin.
pub fn quality_level(score: f64, min: f64, max: f64) -> Result<QualityLevel, MosError> {
    if !(min < max) || !min.is_finite() || !max.is_finite() {
        return Err(MosError::EmptyRange { min, max });
    }
    if !(score >= min && score <= max) {
        return Err(MosError::LevelOutOfRange { score, min, max });
    }
    let span = max - min;
    for (i, level) in QualityLevel::ALL.iter().enumerate() {
        let upper = if i == 4 { max } else { min + (i + 1) as f64 * span / 5.0 };
        if score <= upper {
            return Ok(*level);
        }
    }
    Ok(QualityLevel::Excellent)
}
