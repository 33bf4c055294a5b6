//! Domain types shared by every stage: items, rating records, the
//! distortion taxonomy, click annotations and the dataset manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Errors produced while parsing or validating core records.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown distortion category {0:?}")]
    UnknownCategory(String),

    #[error("unknown dimension {0:?} (expected \"quality\" or \"authenticity\")")]
    UnknownDimension(String),

    #[error("distortion label for item {item} has no categories")]
    EmptyCategories { item: String },

    #[error("distortion label for item {item} combines \"No Distortion\" with other categories")]
    NoDistortionNotExclusive { item: String },

    #[error("point ({x}, {y}) lies outside the {width}x{height} image of item {item}")]
    PointOutOfBounds {
        item: String,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },

    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },

    #[error("manifest item id must be non-empty")]
    EmptyItemId,

    #[error("manifest lists item {0:?} more than once")]
    DuplicateItem(String),

    #[error("item {item}: media file {path} does not exist")]
    MissingMedia { item: String, path: PathBuf },

    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Identifier of one generated face video / snapshot pair.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    pub fn new(id: impl Into<String>) -> Self {
        ItemId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_owned())
    }
}

/// The two rating dimensions collected for every item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Quality,
    Authenticity,
}

impl Dimension {
    pub const ALL: [Dimension; 2] = [Dimension::Quality, Dimension::Authenticity];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Quality => "quality",
            Dimension::Authenticity => "authenticity",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "quality" => Ok(Dimension::Quality),
            "authenticity" => Ok(Dimension::Authenticity),
            _ => Err(ModelError::UnknownDimension(s.to_owned())),
        }
    }
}

/// Lowest and highest value a rating slider can produce.
pub const SCORE_MIN: f64 = 0.0;
pub const SCORE_MAX: f64 = 5.0;

/// One subject's raw slider score for one item on one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub subject_id: String,
    pub item_id: ItemId,
    pub dimension: Dimension,
    #[serde(serialize_with = "serialize_one_decimal")]
    pub score: f64,
    pub timestamp: DateTime<Utc>,
}

fn serialize_one_decimal<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_one_decimal(*v))
}

/// Scores keep one decimal place on export.
pub fn round_one_decimal(v: f64) -> f64 {
    if v.is_finite() {
        (v * 10.0).round() / 10.0
    } else {
        v
    }
}

impl RatingRecord {
    pub fn in_range(&self) -> bool {
        self.score.is_finite() && (SCORE_MIN..=SCORE_MAX).contains(&self.score)
    }
}

/// Reads a ratings file: one JSON object per line, blank lines ignored.
pub fn read_ratings_jsonl(reader: impl BufRead, origin: &str) -> Result<Vec<RatingRecord>, ModelError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| ModelError::Io {
            context: format!("reading {origin}"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| ModelError::Json {
            path: origin.to_owned(),
            line: idx + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_ratings_jsonl(mut writer: impl Write, records: &[RatingRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Key identifying a rating slot: each subject rates each item once per dimension.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct RatingKey {
    pub subject_id: String,
    pub item_id: ItemId,
    pub dimension: Dimension,
}

impl RatingKey {
    pub fn of(r: &RatingRecord) -> Self {
        RatingKey {
            subject_id: r.subject_id.clone(),
            item_id: r.item_id.clone(),
            dimension: r.dimension,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DuplicateFinding {
    pub key: RatingKey,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RangeFinding {
    pub index: usize,
    pub key: RatingKey,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnknownItemFinding {
    pub index: usize,
    pub item_id: ItemId,
}

/// Findings of [`validate_ratings`]. Empty when the input is clean.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub duplicates: Vec<DuplicateFinding>,
    pub out_of_range: Vec<RangeFinding>,
    pub unknown_items: Vec<UnknownItemFinding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.duplicates.is_empty() && self.out_of_range.is_empty() && self.unknown_items.is_empty()
    }

    pub fn finding_count(&self) -> usize {
        self.duplicates.len() + self.out_of_range.len() + self.unknown_items.len()
    }
}

/// Checks a batch of ratings for duplicate keys, out-of-range scores and,
/// when a manifest is supplied, item ids the manifest does not list.
pub fn validate_ratings(records: &[RatingRecord], manifest: Option<&DatasetManifest>) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut counts: BTreeMap<RatingKey, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(RatingKey::of(r)).or_default() += 1;
    }
    report.duplicates = counts
        .into_iter()
        .filter(|(_, c)| *c > 1)
        .map(|(key, count)| DuplicateFinding { key, count })
        .collect();

    for (index, r) in records.iter().enumerate() {
        if !r.in_range() {
            report.out_of_range.push(RangeFinding {
                index,
                key: RatingKey::of(r),
                score: r.score,
            });
        }
    }

    if let Some(m) = manifest {
        let known: HashSet<&ItemId> = m.items.iter().map(|i| &i.id).collect();
        for (index, r) in records.iter().enumerate() {
            if !known.contains(&r.item_id) {
                report.unknown_items.push(UnknownItemFinding {
                    index,
                    item_id: r.item_id.clone(),
                });
            }
        }
    }
    report
}

/// The nine distortion classes used to categorize annotator descriptions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DistortionCategory {
    EyeDistortions,
    MouthDistortions,
    HairDistortions,
    FacialFeatureDistortions,
    HeadStructureDistortions,
    OverlapOrBlendingIssues,
    BlurringExposureGrain,
    AccessoriesOrClothDistortions,
    NoDistortion,
}

impl DistortionCategory {
    /// All categories in checklist order.
    pub const ALL: [DistortionCategory; 9] = [
        DistortionCategory::EyeDistortions,
        DistortionCategory::MouthDistortions,
        DistortionCategory::HairDistortions,
        DistortionCategory::FacialFeatureDistortions,
        DistortionCategory::HeadStructureDistortions,
        DistortionCategory::OverlapOrBlendingIssues,
        DistortionCategory::BlurringExposureGrain,
        DistortionCategory::AccessoriesOrClothDistortions,
        DistortionCategory::NoDistortion,
    ];

    /// Canonical display and serialization name.
    pub fn canonical_name(self) -> &'static str {
        match self {
            DistortionCategory::EyeDistortions => "Eye Distortions",
            DistortionCategory::MouthDistortions => "Mouth Distortions",
            DistortionCategory::HairDistortions => "Hair Distortions",
            DistortionCategory::FacialFeatureDistortions => "Facial Feature Distortions",
            DistortionCategory::HeadStructureDistortions => "Head Structure Distortions",
            DistortionCategory::OverlapOrBlendingIssues => "Overlap or Blending Issues",
            DistortionCategory::BlurringExposureGrain => "Blurring/Exposure/Grain",
            DistortionCategory::AccessoriesOrClothDistortions => "Accessories or Cloth Distortions",
            DistortionCategory::NoDistortion => "No Distortion",
        }
    }

    /// One-based index d_1..d_9 in checklist order.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap_or(0) + 1
    }
}

impl fmt::Display for DistortionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

fn fold_name(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Case-insensitive, punctuation-tolerant lookup of a category name.
pub fn parse_category(name: &str) -> Result<DistortionCategory, ModelError> {
    let folded = fold_name(name);
    DistortionCategory::ALL
        .iter()
        .copied()
        .find(|c| fold_name(c.canonical_name()) == folded && !folded.is_empty())
        .ok_or_else(|| ModelError::UnknownCategory(name.to_owned()))
}

impl FromStr for DistortionCategory {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_category(s)
    }
}

impl Serialize for DistortionCategory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for DistortionCategory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_category(&s).map_err(serde::de::Error::custom)
    }
}

/// Checks the taxonomy rules for one label set.
pub fn validate_category_set(item: &ItemId, categories: &BTreeSet<DistortionCategory>) -> Result<(), ModelError> {
    if categories.is_empty() {
        return Err(ModelError::EmptyCategories { item: item.0.clone() });
    }
    if categories.contains(&DistortionCategory::NoDistortion) && categories.len() > 1 {
        return Err(ModelError::NoDistortionNotExclusive { item: item.0.clone() });
    }
    Ok(())
}

/// One annotator's classification of the distortions visible in an item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDistortionLabel")]
pub struct DistortionLabel {
    pub item_id: ItemId,
    pub annotator_id: String,
    pub categories: BTreeSet<DistortionCategory>,
    pub description: String,
}

#[derive(Deserialize)]
struct RawDistortionLabel {
    item_id: ItemId,
    annotator_id: String,
    categories: BTreeSet<DistortionCategory>,
    #[serde(default)]
    description: String,
}

impl TryFrom<RawDistortionLabel> for DistortionLabel {
    type Error = ModelError;

    fn try_from(raw: RawDistortionLabel) -> Result<Self, Self::Error> {
        DistortionLabel::new(raw.item_id, raw.annotator_id, raw.categories, raw.description)
    }
}

impl DistortionLabel {
    pub fn new(
        item_id: ItemId,
        annotator_id: impl Into<String>,
        categories: BTreeSet<DistortionCategory>,
        description: impl Into<String>,
    ) -> Result<Self, ModelError> {
        validate_category_set(&item_id, &categories)?;
        Ok(DistortionLabel {
            item_id,
            annotator_id: annotator_id.into(),
            categories,
            description: description.into(),
        })
    }
}

/// Pixel coordinate of one click, in the annotated image's own pixel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

impl Point {
    pub fn new(x: i64, y: i64) -> Self {
        Point { x, y }
    }
}

/// Clicked distortion points of one annotator on one item's composite image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixationAnnotation {
    pub item_id: ItemId,
    pub annotator_id: String,
    pub image_width: u32,
    pub image_height: u32,
    #[serde(default)]
    pub points: Vec<Point>,
}

impl FixationAnnotation {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(ModelError::EmptyImage {
                width: self.image_width,
                height: self.image_height,
            });
        }
        for p in &self.points {
            if p.x < 0 || p.y < 0 || p.x >= self.image_width as i64 || p.y >= self.image_height as i64 {
                return Err(ModelError::PointOutOfBounds {
                    item: self.item_id.0.clone(),
                    x: p.x,
                    y: p.y,
                    width: self.image_width,
                    height: self.image_height,
                });
            }
        }
        Ok(())
    }
}

/// Five-level text scale, ordered from worst to best.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityLevel {
    Bad,
    Poor,
    Fair,
    Good,
    Excellent,
}

impl QualityLevel {
    pub const ALL: [QualityLevel; 5] = [
        QualityLevel::Bad,
        QualityLevel::Poor,
        QualityLevel::Fair,
        QualityLevel::Good,
        QualityLevel::Excellent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QualityLevel::Bad => "bad",
            QualityLevel::Poor => "poor",
            QualityLevel::Fair => "fair",
            QualityLevel::Good => "good",
            QualityLevel::Excellent => "excellent",
        }
    }
}

impl fmt::Display for QualityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest entry. Paths are relative to the manifest file unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: ItemId,
    pub model_tag: String,
    #[serde(default)]
    pub video: Option<PathBuf>,
    #[serde(default)]
    pub snapshot: Option<PathBuf>,
    /// Pixel size of the composite snapshot that annotators mark on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_height: Option<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ManifestItem {
    pub fn new(id: impl Into<String>, model_tag: impl Into<String>) -> Self {
        ManifestItem {
            id: ItemId::new(id),
            model_tag: model_tag.into(),
            video: None,
            snapshot: None,
            snapshot_width: None,
            snapshot_height: None,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn new(items: Vec<ManifestItem>) -> Result<Self, ModelError> {
        let m = DatasetManifest { items };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<(), ModelError> {
        let mut seen = HashSet::new();
        for item in &self.items {
            if item.id.0.is_empty() {
                return Err(ModelError::EmptyItemId);
            }
            if !seen.insert(&item.id) {
                return Err(ModelError::DuplicateItem(item.id.0.clone()));
            }
        }
        Ok(())
    }

    /// Loads a JSON manifest. With `strict`, every listed media path must exist.
    pub fn load(path: &Path, strict: bool) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            context: format!("reading manifest {}", path.display()),
            source,
        })?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|source| ModelError::Json {
            path: path.display().to_string(),
            line: 0,
            source,
        })?;
        m.check_ids()?;
        if strict {
            let base = path.parent().unwrap_or(Path::new("."));
            for item in &m.items {
                for media in [&item.video, &item.snapshot].into_iter().flatten() {
                    let full = base.join(media);
                    if !full.exists() {
                        return Err(ModelError::MissingMedia {
                            item: item.id.0.clone(),
                            path: full,
                        });
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn get(&self, id: &ItemId) -> Option<&ManifestItem> {
        self.items.iter().find(|i| &i.id == id)
    }

    pub fn index(&self) -> HashMap<&ItemId, &ManifestItem> {
        self.items.iter().map(|i| (&i.id, i)).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
