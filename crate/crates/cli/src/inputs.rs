//! Locating slides and reading dataset and label files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use pathbench_core::embed::EmbeddingSet;
use pathbench_core::slide_io::open_slide;
use pathbench_core::{Error, Slide};

use crate::{CliError, CliResult};

const RASTER_EXTS: [&str; 4] = ["png", "ppm", "pnm", "pgm"];

fn is_pyramid_dir(p: &Path) -> bool {
    p.is_dir() && p.join("meta.json").is_file()
}

/// Expands inputs into slide paths: files and pyramid directories are taken
/// as-is; other directories contribute their raster files and pyramid
/// subdirectories, in name order.
pub fn discover_slides(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if !p.exists() {
            return Err(Error::NotFound(p.clone()).into());
        }
        if p.is_file() || is_pyramid_dir(p) {
            out.push(p.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(Error::from)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| {
                is_pyramid_dir(c)
                    || (c.is_file()
                        && c.extension()
                            .and_then(|e| e.to_str())
                            .is_some_and(|e| RASTER_EXTS.contains(&e.to_ascii_lowercase().as_str())))
            })
            .collect();
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

/// Opens every slide under `inputs`, keyed by slide id.
pub fn open_slides(inputs: &[PathBuf]) -> CliResult<BTreeMap<String, Slide>> {
    let mut out = BTreeMap::new();
    for path in discover_slides(inputs)? {
        let slide = open_slide(&path)?;
        let id = slide.id().to_string();
        if out.insert(id.clone(), slide).is_some() {
            return Err(CliError::Usage(format!("two input slides share the id {id:?}")));
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no slides found in the given inputs".into()));
    }
    Ok(out)
}

/// A class given either by index or by name.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Index(usize),
    Name(String),
}

/// Maps raw labels to indices. Configured `classes` fix the order;
/// otherwise integer labels are used directly and names are sorted.
pub fn resolve_labels(raw: &[LabelValue], classes: &[String]) -> CliResult<(Vec<usize>, Vec<String>)> {
    if !classes.is_empty() {
        let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let labels = raw
            .iter()
            .map(|l| match l {
                LabelValue::Index(i) if *i < classes.len() => Ok(*i),
                LabelValue::Index(i) => Err(CliError::Usage(format!("label {i} outside {} classes", classes.len()))),
                LabelValue::Name(n) => index
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| CliError::Usage(format!("label {n:?} is not in the configured classes"))),
            })
            .collect::<CliResult<Vec<_>>>()?;
        return Ok((labels, classes.to_vec()));
    }
    if raw.iter().all(|l| matches!(l, LabelValue::Index(_))) {
        let labels: Vec<usize> = raw
            .iter()
            .map(|l| match l {
                LabelValue::Index(i) => *i,
                LabelValue::Name(_) => unreachable!(),
            })
            .collect();
        let n = labels.iter().max().map_or(0, |m| m + 1);
        return Ok((labels, (0..n).map(|i| i.to_string()).collect()));
    }
    let names: BTreeSet<&str> = raw
        .iter()
        .map(|l| match l {
            LabelValue::Name(n) => Ok(n.as_str()),
            LabelValue::Index(_) => Err(CliError::Usage("labels mix integers and names".into())),
        })
        .collect::<CliResult<_>>()?;
    let classes: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let labels = raw
        .iter()
        .map(|l| match l {
            LabelValue::Name(n) => index[n.as_str()],
            LabelValue::Index(_) => unreachable!(),
        })
        .collect();
    Ok((labels, classes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetItem {
    pub key: String,
    #[serde(default)]
    pub slide_id: Option<String>,
    pub label: LabelValue,
    #[serde(default)]
    pub split: Option<SplitName>,
}

pub fn read_dataset(path: &Path) -> CliResult<Vec<DatasetItem>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let items = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect::<CliResult<Vec<DatasetItem>>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("{} has no items", path.display())));
    }
    Ok(items)
}

/// Locates each item's embedding row as `(slide_id, row)`. Items without a
/// slide id are looked up across all slides and must match exactly once.
pub fn locate_items(
    items: &[DatasetItem],
    sets: &BTreeMap<String, EmbeddingSet>,
) -> CliResult<Vec<(String, usize)>> {
    let indexes: BTreeMap<&str, HashMap<&str, usize>> =
        sets.iter().map(|(id, s)| (id.as_str(), s.key_index())).collect();
    items
        .iter()
        .map(|item| match &item.slide_id {
            Some(slide) => {
                let index = indexes.get(slide.as_str()).ok_or_else(|| Error::MissingSlide(slide.clone()))?;
                let row = index.get(item.key.as_str()).ok_or_else(|| Error::MissingKey {
                    slide: slide.clone(),
                    key: item.key.clone(),
                })?;
                Ok((slide.clone(), *row))
            }
            None => {
                let hits: Vec<(&str, usize)> = indexes
                    .iter()
                    .filter_map(|(s, idx)| idx.get(item.key.as_str()).map(|r| (*s, *r)))
                    .collect();
                match hits[..] {
                    [(s, r)] => Ok((s.to_string(), r)),
                    [] => Err(CliError::Usage(format!("key {:?} not found in any embedding file", item.key))),
                    _ => Err(CliError::Usage(format!(
                        "key {:?} appears in several slides; give slide_id",
                        item.key
                    ))),
                }
            }
        })
        .collect()
}

/// Slide id → class, from a JSON object.
pub fn read_labels(path: &Path) -> CliResult<BTreeMap<String, LabelValue>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
