//! Loading inputs and writing outputs with path-qualified errors.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use g3dhf_core::bench::{read_category_predictions, read_score_predictions, SaliencyTruth, ScorePrediction, SplitSpec};
use g3dhf_core::model::{read_ratings_jsonl, DistortionCategory, DistortionLabel, FixationAnnotation, RatingRecord};
use g3dhf_core::saliency::{gaussian_blur, merge_annotations, read_raw, SaliencyMap};
use g3dhf_core::{DatasetManifest, ItemId, MosTable};
use rayon::prelude::*;

use crate::error::{invalid, Classify, CliResult};

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).invalid_ctx(format!("reading {}", path.display()))
}

pub fn manifest(path: &Path) -> CliResult<DatasetManifest> {
    DatasetManifest::load(path, false).invalid()
}

pub fn ratings(paths: &[PathBuf]) -> CliResult<Vec<RatingRecord>> {
    let mut all = Vec::new();
    for p in paths {
        let text = read_text(p)?;
        all.extend(read_ratings_jsonl(text.as_bytes(), &p.display().to_string()).invalid()?);
    }
    Ok(all)
}

/// Parses a JSON list, reporting the element index of schema errors.
fn json_list<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = read_text(path)?;
    let values: Vec<serde_json::Value> = serde_json::from_str(&text).invalid_ctx(path.display())?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value(v).invalid_ctx(format!("{} [{i}]", path.display())))
        .collect()
}

pub fn fixations(path: &Path) -> CliResult<Vec<FixationAnnotation>> {
    let list: Vec<FixationAnnotation> = json_list(path)?;
    for (i, a) in list.iter().enumerate() {
        a.validate().invalid_ctx(format!("{} [{i}]", path.display()))?;
    }
    Ok(list)
}

pub fn labels(path: &Path) -> CliResult<Vec<DistortionLabel>> {
    json_list(path)
}

pub fn mos(path: &Path) -> CliResult<MosTable> {
    let text = read_text(path)?;
    MosTable::read_csv(text.as_bytes()).invalid_ctx(path.display())
}

pub fn split(path: &Path) -> CliResult<SplitSpec> {
    SplitSpec::from_json(&read_text(path)?).invalid_ctx(path.display())
}

pub fn score_predictions(path: &Path) -> CliResult<BTreeMap<ItemId, ScorePrediction>> {
    let text = read_text(path)?;
    read_score_predictions(text.as_bytes()).invalid_ctx(path.display())
}

pub fn category_predictions(path: &Path) -> CliResult<BTreeMap<ItemId, BTreeSet<DistortionCategory>>> {
    read_category_predictions(&read_text(path)?).invalid_ctx(path.display())
}

/// Groups annotations by item in id order.
pub fn group_by_item(anns: Vec<FixationAnnotation>) -> BTreeMap<ItemId, Vec<FixationAnnotation>> {
    let mut by_item: BTreeMap<ItemId, Vec<FixationAnnotation>> = BTreeMap::new();
    for a in anns {
        by_item.entry(a.item_id.clone()).or_default().push(a);
    }
    by_item
}

/// Merged fixation maps and their blurred ground truth, one per item.
pub fn saliency_truth(anns: Vec<FixationAnnotation>, sigma: f64) -> CliResult<BTreeMap<ItemId, SaliencyTruth>> {
    group_by_item(anns)
        .into_par_iter()
        .map(|(item, group)| {
            let fixations = merge_annotations(&group).invalid_ctx(format!("item {item}"))?;
            let map = gaussian_blur(&fixations, sigma).invalid()?;
            Ok((item, SaliencyTruth { map, fixations }))
        })
        .collect()
}

/// Loads `<dir>/<item>.g3ds` for every listed item; all missing files are reported together.
pub fn predicted_maps<'a>(dir: &Path, items: impl IntoIterator<Item = &'a ItemId>) -> CliResult<BTreeMap<ItemId, SaliencyMap>> {
    let items: Vec<&ItemId> = items.into_iter().collect();
    for i in &items {
        safe_file_stem(i)?;
    }
    let missing: Vec<String> = items
        .iter()
        .map(|i| map_path(dir, i))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return invalid(format!("missing predicted maps: {}", missing.join(", ")));
    }
    items
        .into_par_iter()
        .map(|i| {
            let path = map_path(dir, i);
            let file = std::fs::File::open(&path).invalid_ctx(path.display())?;
            let map = read_raw(std::io::BufReader::new(file)).invalid_ctx(path.display())?;
            Ok((i.clone(), map))
        })
        .collect()
}

pub fn map_path(dir: &Path, item: &ItemId) -> PathBuf {
    dir.join(format!("{}.g3ds", item.as_str()))
}

/// Item ids become file names, so they must not address other directories.
pub fn safe_file_stem(item: &ItemId) -> CliResult<&str> {
    let s = item.as_str();
    if s.is_empty() || s == "." || s == ".." || s.contains(['/', '\\', '\0']) {
        return invalid(format!("item id {s:?} cannot be used as a file name"));
    }
    Ok(s)
}

/// Categories marked by at least half of an item's annotators.
pub fn label_consensus(labels: &[DistortionLabel]) -> BTreeMap<ItemId, BTreeSet<DistortionCategory>> {
    let mut votes: BTreeMap<&ItemId, (usize, BTreeMap<DistortionCategory, usize>)> = BTreeMap::new();
    for l in labels {
        let entry = votes.entry(&l.item_id).or_default();
        entry.0 += 1;
        for c in &l.categories {
            *entry.1.entry(*c).or_default() += 1;
        }
    }
    votes
        .into_iter()
        .map(|(item, (n, counts))| {
            let set = counts.into_iter().filter(|(_, k)| 2 * k >= n).map(|(c, _)| c).collect();
            (item.clone(), set)
        })
        .collect()
}

/// `NAME=PATH` pairs for multi-predictor flags.
pub fn named_path(arg: &str, flag: &str) -> CliResult<(String, PathBuf)> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_owned(), PathBuf::from(path))),
        _ => invalid(format!("{flag} expects NAME=PATH, got {arg:?}")),
    }
}

/// Writes to `path`, creating parent directories, or to stdout when absent.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> CliResult {
    match path {
        Some(p) => write_file(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes).and_then(|_| out.flush()).runtime("writing stdout")
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).runtime(format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).runtime(format!("writing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).runtime(format!("creating {}", dir.display()))
}
