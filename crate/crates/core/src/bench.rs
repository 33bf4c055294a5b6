//! Cross-validation splits, per-fold evaluation of a predictor and report
//! rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agreement::{krcc, plcc, qa_accuracy, srcc, AccuracyMode, AgreementError, PairedScores};
use crate::model::{DatasetManifest, Dimension, DistortionCategory, ItemId};
use crate::mos::MosTable;
use crate::saliency::{FixationMap, SaliencyMap};
use crate::saliency_metrics::{evaluate_pair, MetricError, SaliencyMetricConfig, SaliencyScores};

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("need k >= 2 folds, got {0}")]
    TooFewFolds(usize),

    #[error("cannot split {items} items into {k} folds")]
    TooFewItems { items: usize, k: usize },

    #[error("fold {fold} out of range for a {k}-fold split")]
    NoSuchFold { fold: usize, k: usize },

    #[error("missing {kind} predictions for: {}", .items.join(", "))]
    MissingPredictions { kind: &'static str, items: Vec<String> },

    #[error("fold {fold} has {count} rated test items on {dimension}; need at least 2")]
    TooFewTestItems { fold: usize, dimension: Dimension, count: usize },

    #[error("fold {fold}, {dimension}: {source}")]
    Agreement {
        fold: usize,
        dimension: Dimension,
        #[source]
        source: AgreementError,
    },

    #[error("item {item}: {source}")]
    Saliency {
        item: ItemId,
        #[source]
        source: MetricError,
    },

    #[error("fold {fold}: {source}")]
    Accuracy {
        fold: usize,
        #[source]
        source: AgreementError,
    },

    #[error("no reports to render")]
    NoReports,

    #[error("predictions line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Item-to-fold assignment for k-fold cross-validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub k: usize,
    pub folds: BTreeMap<ItemId, usize>,
}

/// Shuffles items within each generator stratum and deals them round-robin
/// into `k` folds, continuing the rotation across strata so both per-stratum
/// and overall fold sizes differ by at most one.
pub fn make_splits(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<SplitSpec, BenchError> {
    if k < 2 {
        return Err(BenchError::TooFewFolds(k));
    }
    if manifest.len() < k {
        return Err(BenchError::TooFewItems { items: manifest.len(), k });
    }
    let mut strata: BTreeMap<&str, Vec<&ItemId>> = BTreeMap::new();
    for item in &manifest.items {
        strata.entry(item.model_tag.as_str()).or_default().push(&item.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let mut offset = 0;
    for ids in strata.values_mut() {
        ids.sort();
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            folds.insert((*id).clone(), (offset + i) % k);
        }
        offset = (offset + ids.len()) % k;
    }
    Ok(SplitSpec { seed, k, folds })
}

impl SplitSpec {
    pub fn test_items(&self, fold: usize) -> Vec<&ItemId> {
        self.folds.iter().filter(|(_, f)| **f == fold).map(|(i, _)| i).collect()
    }

    pub fn train_items(&self, fold: usize) -> Vec<&ItemId> {
        self.folds.iter().filter(|(_, f)| **f != fold).map(|(i, _)| i).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for f in self.folds.values() {
            sizes[*f] += 1;
        }
        sizes
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub quality: f64,
    pub authenticity: f64,
}

impl ScorePrediction {
    pub fn get(&self, dimension: Dimension) -> f64 {
        match dimension {
            Dimension::Quality => self.quality,
            Dimension::Authenticity => self.authenticity,
        }
    }
}

/// Parses `item_id,quality_score,authenticity_score` rows.
pub fn read_score_predictions(r: impl BufRead) -> Result<BTreeMap<ItemId, ScorePrediction>, BenchError> {
    let mut out = BTreeMap::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let bad = |message: String| BenchError::Parse { line: lineno, message };
        if idx == 0 {
            if line.trim() != "item_id,quality_score,authenticity_score" {
                return Err(bad(format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad score {s:?}")));
        out.insert(
            ItemId::new(f[0]),
            ScorePrediction {
                quality: num(f[1])?,
                authenticity: num(f[2])?,
            },
        );
    }
    Ok(out)
}

/// One entry of a category-prediction file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryPrediction {
    pub item_id: ItemId,
    pub categories: BTreeSet<DistortionCategory>,
}

pub fn read_category_predictions(text: &str) -> Result<BTreeMap<ItemId, BTreeSet<DistortionCategory>>, BenchError> {
    let list: Vec<CategoryPrediction> = serde_json::from_str(text)?;
    Ok(list.into_iter().map(|c| (c.item_id, c.categories)).collect())
}

/// Ground-truth saliency for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyTruth {
    pub map: SaliencyMap,
    pub fixations: FixationMap,
}

/// Everything one predictor is scored against. Saliency and category parts
/// are optional; when present, predictions must cover every test item.
#[derive(Clone, Copy, Debug)]
pub struct EvalInputs<'a> {
    pub mos: &'a MosTable,
    pub scores: &'a BTreeMap<ItemId, ScorePrediction>,
    pub saliency_truth: Option<&'a BTreeMap<ItemId, SaliencyTruth>>,
    pub saliency_pred: Option<&'a BTreeMap<ItemId, SaliencyMap>>,
    pub label_truth: Option<&'a BTreeMap<ItemId, BTreeSet<DistortionCategory>>>,
    pub label_pred: Option<&'a BTreeMap<ItemId, BTreeSet<DistortionCategory>>>,
}

impl<'a> EvalInputs<'a> {
    pub fn scores_only(mos: &'a MosTable, scores: &'a BTreeMap<ItemId, ScorePrediction>) -> Self {
        EvalInputs {
            mos,
            scores,
            saliency_truth: None,
            saliency_pred: None,
            label_truth: None,
            label_pred: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub accuracy_mode: AccuracyMode,
    pub saliency: SaliencyMetricConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationScores {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub quality: Option<CorrelationScores>,
    pub authenticity: Option<CorrelationScores>,
    pub qa_accuracy: Option<f64>,
    pub saliency: Option<SaliencyScores>,
}

impl FoldMetrics {
    pub fn correlation(&self, d: Dimension) -> Option<&CorrelationScores> {
        match d {
            Dimension::Quality => self.quality.as_ref(),
            Dimension::Authenticity => self.authenticity.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_test: usize,
    /// Items that entered the saliency averages (those with at least one fixation).
    pub n_saliency: usize,
    pub metrics: FoldMetrics,
}

fn correlations(p: &PairedScores) -> Result<CorrelationScores, AgreementError> {
    Ok(CorrelationScores {
        srcc: srcc(p)?,
        plcc: plcc(p)?,
        krcc: krcc(p),
    })
}

/// Scores a predictor on the test items of one fold.
pub fn evaluate_fold(inputs: &EvalInputs<'_>, split: &SplitSpec, fold: usize, cfg: &EvalConfig) -> Result<FoldReport, BenchError> {
    if fold >= split.k {
        return Err(BenchError::NoSuchFold { fold, k: split.k });
    }
    let test = split.test_items(fold);

    let missing: Vec<String> = test
        .iter()
        .filter(|i| Dimension::ALL.iter().any(|d| inputs.mos.get(i, *d).is_some()))
        .filter(|i| !inputs.scores.contains_key(**i))
        .map(|i| i.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(BenchError::MissingPredictions { kind: "score", items: missing });
    }

    let mut metrics = FoldMetrics::default();
    for dimension in Dimension::ALL {
        let (truth, pred): (Vec<f64>, Vec<f64>) = test
            .iter()
            .filter_map(|i| inputs.mos.get(i, dimension).map(|m| (m, inputs.scores[*i].get(dimension))))
            .unzip();
        if truth.is_empty() {
            continue;
        }
        if truth.len() < 2 {
            return Err(BenchError::TooFewTestItems { fold, dimension, count: truth.len() });
        }
        let scores = PairedScores::new(truth, pred)
            .and_then(|p| correlations(&p))
            .map_err(|source| BenchError::Agreement { fold, dimension, source })?;
        match dimension {
            Dimension::Quality => metrics.quality = Some(scores),
            Dimension::Authenticity => metrics.authenticity = Some(scores),
        }
    }

    let mut n_saliency = 0;
    if let (Some(truth), Some(pred)) = (inputs.saliency_truth, inputs.saliency_pred) {
        let scored: Vec<(&ItemId, &SaliencyTruth)> = test
            .iter()
            .filter_map(|i| truth.get(*i).map(|t| (*i, t)))
            .filter(|(_, t)| t.fixations.count() > 0)
            .collect();
        let missing: Vec<String> = scored.iter().filter(|(i, _)| !pred.contains_key(*i)).map(|(i, _)| i.to_string()).collect();
        if !missing.is_empty() {
            return Err(BenchError::MissingPredictions { kind: "saliency", items: missing });
        }
        let per_item = scored
            .iter()
            .map(|(i, t)| {
                evaluate_pair(&pred[*i], &t.map, &t.fixations, &cfg.saliency).map_err(|source| BenchError::Saliency {
                    item: (*i).clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        n_saliency = per_item.len();
        metrics.saliency = SaliencyScores::mean(&per_item);
    }

    if let (Some(truth), Some(pred)) = (inputs.label_truth, inputs.label_pred) {
        let labelled: Vec<&ItemId> = test.iter().copied().filter(|i| truth.contains_key(*i)).collect();
        let missing: Vec<String> = labelled.iter().filter(|i| !pred.contains_key(**i)).map(|i| i.to_string()).collect();
        if !missing.is_empty() {
            return Err(BenchError::MissingPredictions { kind: "category", items: missing });
        }
        if !labelled.is_empty() {
            let t: Vec<_> = labelled.iter().map(|i| truth[*i].clone()).collect();
            let p: Vec<_> = labelled.iter().map(|i| pred[*i].clone()).collect();
            let acc = qa_accuracy(&t, &p, cfg.accuracy_mode).map_err(|source| BenchError::Accuracy { fold, source })?;
            metrics.qa_accuracy = Some(acc.value);
        }
    }

    Ok(FoldReport {
        fold,
        n_test: test.len(),
        n_saliency,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub predictor: String,
    pub folds: Vec<FoldReport>,
    pub mean: FoldMetrics,
    pub config_fingerprint: String,
}

fn mean_of<T>(folds: &[FoldReport], get: impl Fn(&FoldMetrics) -> Option<T>, combine: impl Fn(&[T]) -> T) -> Option<T> {
    let vals: Option<Vec<T>> = folds.iter().map(|f| get(&f.metrics)).collect();
    vals.filter(|v| !v.is_empty()).map(|v| combine(&v))
}

/// Unweighted mean over folds. A metric is reported only when every fold has it.
pub fn mean_metrics(folds: &[FoldReport]) -> FoldMetrics {
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let corr = |v: &[CorrelationScores]| CorrelationScores {
        srcc: avg(&v.iter().map(|c| c.srcc).collect::<Vec<_>>()),
        plcc: avg(&v.iter().map(|c| c.plcc).collect::<Vec<_>>()),
        krcc: avg(&v.iter().map(|c| c.krcc).collect::<Vec<_>>()),
    };
    FoldMetrics {
        quality: mean_of(folds, |m| m.quality, corr),
        authenticity: mean_of(folds, |m| m.authenticity, corr),
        qa_accuracy: mean_of(folds, |m| m.qa_accuracy, avg),
        saliency: mean_of(folds, |m| m.saliency, |v| SaliencyScores::mean(v).unwrap()),
    }
}

/// Runs every fold (in parallel) and averages them.
pub fn evaluate_predictor(
    name: &str,
    inputs: &EvalInputs<'_>,
    split: &SplitSpec,
    cfg: &EvalConfig,
    config_fingerprint: &str,
) -> Result<MetricReport, BenchError> {
    let folds = (0..split.k)
        .into_par_iter()
        .map(|f| evaluate_fold(inputs, split, f, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport {
        predictor: name.to_owned(),
        mean: mean_metrics(&folds),
        folds,
        config_fingerprint: config_fingerprint.to_owned(),
    })
}

/// Short stable hash of a serializable configuration.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

#[derive(Clone, Copy)]
struct Column {
    key: &'static str,
    title: &'static str,
    lower_is_better: bool,
    get: fn(&FoldMetrics) -> Option<f64>,
}

const COLUMNS: [Column; 12] = [
    Column { key: "quality_srcc", title: "Q-SRCC", lower_is_better: false, get: |m| m.quality.map(|c| c.srcc) },
    Column { key: "quality_plcc", title: "Q-PLCC", lower_is_better: false, get: |m| m.quality.map(|c| c.plcc) },
    Column { key: "quality_krcc", title: "Q-KRCC", lower_is_better: false, get: |m| m.quality.map(|c| c.krcc) },
    Column { key: "authenticity_srcc", title: "A-SRCC", lower_is_better: false, get: |m| m.authenticity.map(|c| c.srcc) },
    Column { key: "authenticity_plcc", title: "A-PLCC", lower_is_better: false, get: |m| m.authenticity.map(|c| c.plcc) },
    Column { key: "authenticity_krcc", title: "A-KRCC", lower_is_better: false, get: |m| m.authenticity.map(|c| c.krcc) },
    Column { key: "qa_accuracy", title: "QA Acc", lower_is_better: false, get: |m| m.qa_accuracy },
    Column { key: "auc", title: "AUC", lower_is_better: false, get: |m| m.saliency.map(|s| s.auc) },
    Column { key: "nss", title: "NSS", lower_is_better: false, get: |m| m.saliency.map(|s| s.nss) },
    Column { key: "cc", title: "CC", lower_is_better: false, get: |m| m.saliency.map(|s| s.cc) },
    Column { key: "sim", title: "SIM", lower_is_better: false, get: |m| m.saliency.map(|s| s.sim) },
    Column { key: "kld", title: "KLD", lower_is_better: true, get: |m| m.saliency.map(|s| s.kld) },
];

/// CSV column names after `predictor,fold` and before `config_fingerprint`.
pub fn report_csv_columns() -> Vec<&'static str> {
    COLUMNS.iter().map(|c| c.key).collect()
}

/// Markdown table of fold means (best value per column in bold when there
/// is more than one predictor) or a CSV with one row per fold plus a mean row.
pub fn render_report(reports: &[MetricReport], format: ReportFormat) -> Result<String, BenchError> {
    if reports.is_empty() {
        return Err(BenchError::NoReports);
    }
    Ok(match format {
        ReportFormat::Markdown => render_markdown(reports),
        ReportFormat::Csv => render_csv(reports),
    })
}

fn render_markdown(reports: &[MetricReport]) -> String {
    let cols: Vec<Column> = COLUMNS
        .iter()
        .copied()
        .filter(|c| reports.iter().any(|r| (c.get)(&r.mean).is_some()))
        .collect();
    let mut out = String::new();
    out.push_str("# Benchmark report\n\n");
    let prints: BTreeSet<&str> = reports.iter().map(|r| r.config_fingerprint.as_str()).collect();
    for p in prints {
        let _ = writeln!(out, "config fingerprint: `{p}`");
    }
    let folds = reports.iter().map(|r| r.folds.len()).max().unwrap_or(0);
    let _ = writeln!(out, "values are means over {folds} folds\n");

    out.push_str("| Predictor |");
    for c in &cols {
        let _ = write!(out, " {} |", c.title);
    }
    out.push_str("\n|---|");
    for _ in &cols {
        out.push_str("---:|");
    }
    out.push('\n');

    let best: Vec<Option<f64>> = cols
        .iter()
        .map(|c| {
            let vals = reports.iter().filter_map(|r| (c.get)(&r.mean));
            if c.lower_is_better {
                vals.reduce(f64::min)
            } else {
                vals.reduce(f64::max)
            }
        })
        .collect();

    for r in reports {
        let _ = write!(out, "| {} |", r.predictor);
        for (c, b) in cols.iter().zip(&best) {
            match (c.get)(&r.mean) {
                Some(v) if reports.len() > 1 && Some(v) == *b => {
                    let _ = write!(out, " **{v:.4}** |");
                }
                Some(v) => {
                    let _ = write!(out, " {v:.4} |");
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

fn render_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("predictor,fold");
    for c in &COLUMNS {
        out.push(',');
        out.push_str(c.key);
    }
    out.push_str(",config_fingerprint\n");
    let mut row = |name: &str, fold: &str, m: &FoldMetrics, print: &str| {
        out.push_str(name);
        out.push(',');
        out.push_str(fold);
        for c in &COLUMNS {
            out.push(',');
            if let Some(v) = (c.get)(m) {
                let _ = write!(out, "{v}");
            }
        }
        out.push(',');
        out.push_str(print);
        out.push('\n');
    };
    for r in reports {
        for f in &r.folds {
            row(&r.predictor, &f.fold.to_string(), &f.metrics, &r.config_fingerprint);
        }
        row(&r.predictor, "mean", &r.mean, &r.config_fingerprint);
    }
    out
}
