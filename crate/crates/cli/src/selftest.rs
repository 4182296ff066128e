//! Zero-data smoke run: synthetic slide → tile → toy embed → linear probe
//! on the slide's band labels → report.

use std::path::Path;
use std::time::{Duration, Instant};

use pathbench_core::eval::{EvalReport, LabeledSet};
use pathbench_core::fsutil::atomic_write;
use pathbench_core::synth::{band_of, synthetic_slide};
use pathbench_core::tissue::build_manifest_multi;
use pathbench_core::Slide;

use crate::commands::{embed_manifest, probe_features, write_embedding_files};
use crate::config::RunConfig;
use crate::inputs::{DatasetItem, LabelValue};
use crate::CliResult;

pub const DEFAULT_SIZE: u32 = 4096;
pub const MIN_SIZE: u32 = 2048;
pub const SLIDE_ID: &str = "synthetic";
const N_BLOBS: usize = 45;
const N_CLASSES: usize = 3;

#[derive(Debug, Clone)]
pub struct SelftestSummary {
    pub grid_patches: usize,
    pub kept_patches: usize,
    pub tiling: Duration,
    pub total: Duration,
    pub report: EvalReport,
}

pub fn run(out: &Path, size: u32, cfg: &RunConfig) -> CliResult<SelftestSummary> {
    let start = Instant::now();
    let img = synthetic_slide(size, N_BLOBS, cfg.seed())?;
    let slide = Slide::from_image(SLIDE_ID, img);

    let t = Instant::now();
    let tiling = cfg.tiling.to_core(cfg.seed());
    let mut manifest = build_manifest_multi(std::slice::from_ref(&slide), &tiling)?;
    let tiling_time = t.elapsed();
    let level = slide.level(tiling.level)?;
    let ps = tiling.patch_size as u64;
    let grid_patches = ((level.width as u64 / ps) * (level.height as u64 / ps)) as usize;

    let hash = cfg.hash()?;
    manifest.config_hash = hash.clone();
    manifest.write(&out.join("manifest.jsonl"))?;

    let slides = [(SLIDE_ID.to_string(), slide.clone())].into_iter().collect();
    let sets = embed_manifest(&manifest, &slides, cfg)?;
    let set = &sets[0];
    write_embedding_files(set, &out.join("features"), cfg, &hash)?;

    let (_, h0) = slide.dimensions();
    let labels: Vec<usize> = manifest
        .records
        .iter()
        .map(|r| band_of((r.y as f64 + r.size as f64 / 2.0) * level.downsample, h0))
        .collect();
    let items: Vec<DatasetItem> = manifest
        .records
        .iter()
        .zip(&labels)
        .map(|(r, &y)| DatasetItem {
            key: r.key(),
            slide_id: Some(r.slide_id.clone()),
            label: LabelValue::Index(y),
            split: None,
        })
        .collect();
    let mut dataset = String::new();
    for (item, &y) in items.iter().zip(&labels) {
        dataset.push_str(&serde_json::json!({"key": item.key, "slide_id": SLIDE_ID, "label": y}).to_string());
        dataset.push('\n');
    }
    atomic_write(&out.join("dataset.jsonl"), dataset.as_bytes())?;

    let features = LabeledSet::new(set.to_matrix(), labels)?;
    let report = probe_features(&features, &items, N_CLASSES, &out.join("report.json"), None, cfg)?;

    let summary = SelftestSummary {
        grid_patches,
        kept_patches: manifest.len(),
        tiling: tiling_time,
        total: start.elapsed(),
        report,
    };
    eprintln!(
        "selftest: {}x{} slide, {} of {} grid patches kept, tiling {:.2}s, total {:.2}s, test accuracy {:.4} -> {}",
        size,
        size,
        summary.kept_patches,
        summary.grid_patches,
        summary.tiling.as_secs_f64(),
        summary.total.as_secs_f64(),
        summary.report.metrics["accuracy"],
        out.join("report.json").display()
    );
    Ok(summary)
}
