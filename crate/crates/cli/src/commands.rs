//! Subcommand implementations. Each validates its inputs before writing
//! anything, and every file is written atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use pathbench_core::augment::{augment_view, stain_stats, template_from_stats, StainTemplate};
use pathbench_core::embed::{read_embedding_dir, write_embeddings, Bag, EmbeddingSet, EmbeddingSidecar, ToyEncoder};
use pathbench_core::eval::{
    emit_report, holdout_val, read_report, split_dataset, train_linear_probe, train_mil, EvalReport, LabeledSet,
};
use pathbench_core::nn::{Checkpoint, Matrix};
use pathbench_core::slide_io::read_region;
use pathbench_core::tissue::{build_manifest_multi, sample_unique, PatchManifest, PatchRecord};
use pathbench_core::{Error, RgbImage, Rng, Slide};

use crate::config::RunConfig;
use crate::inputs::{self, SplitName};
use crate::{selftest, CliError, CliResult, Command};

/// Folds subcommand flags into the config; flags win over file and overrides.
pub fn apply_flags(cmd: &Command, cfg: &mut RunConfig) -> CliResult<()> {
    match cmd {
        Command::Tile(a) => {
            if let Some(v) = a.patch_size {
                cfg.tiling.patch_size = v;
            }
            if let Some(v) = a.min_tissue {
                cfg.tiling.min_tissue_fraction = v;
            }
            if let Some(v) = a.thumbnail_max_dim {
                cfg.tiling.thumbnail_max_dim = v;
            }
            if let Some(v) = a.level {
                cfg.tiling.level = v;
            }
        }
        Command::Stainfit(a) => {
            if let Some(s) = a.space {
                cfg.augment.color_space = s;
            }
            if a.max_patches == Some(0) {
                return Err(CliError::Usage("--max-patches must be >= 1".into()));
            }
        }
        Command::Embed(a) => {
            if let Some(e) = &a.encoder {
                cfg.encoder.kind = e.clone();
            }
            if let Some(d) = a.dim {
                cfg.encoder.dim = d;
            }
        }
        Command::Mil(a) => {
            if let Some(r) = &a.ratios {
                let [tr, va, te] = r[..] else {
                    return Err(CliError::Usage(format!("--ratios takes three values, got {}", r.len())));
                };
                cfg.split.ratios = [tr, va, te];
            }
        }
        Command::Selftest(a) => {
            if a.size < selftest::MIN_SIZE {
                return Err(CliError::Usage(format!("--size must be >= {}", selftest::MIN_SIZE)));
            }
        }
        Command::Augment(_) | Command::Probe(_) | Command::Report(_) => {}
    }
    Ok(())
}

pub fn dispatch(cmd: &Command, cfg: &RunConfig) -> CliResult<()> {
    match cmd {
        Command::Tile(a) => tile(&a.input, &a.out, cfg),
        Command::Stainfit(a) => stainfit(&a.manifest, &slide_dirs(&a.slides, &a.manifest), a.max_patches, &a.out, cfg),
        Command::Augment(a) => augment(&a.input, a.template.as_deref(), &a.out, cfg),
        Command::Embed(a) => embed(&a.manifest, &slide_dirs(&a.slides, &a.manifest), &a.out, cfg),
        Command::Probe(a) => probe(&a.features, &a.dataset, &a.out, a.checkpoint.as_deref(), cfg),
        Command::Mil(a) => mil(a, cfg),
        Command::Report(a) => report(&a.input),
        Command::Selftest(a) => selftest::run(&a.out, a.size, cfg).map(|_| ()),
    }
}

fn slide_dirs(given: &[PathBuf], manifest: &Path) -> Vec<PathBuf> {
    if !given.is_empty() {
        return given.to_vec();
    }
    let parent = manifest.parent().filter(|p| !p.as_os_str().is_empty());
    vec![parent.map_or_else(|| PathBuf::from("."), Path::to_path_buf)]
}

fn tile(inputs_: &[PathBuf], out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let slides: Vec<Slide> = inputs::open_slides(inputs_)?.into_values().collect();
    let mut manifest = build_manifest_multi(&slides, &cfg.tiling.to_core(cfg.seed()))?;
    manifest.config_hash = cfg.hash()?;
    manifest.write(out)?;
    eprintln!(
        "tiled {} slide(s): {} patches kept -> {}",
        slides.len(),
        manifest.len(),
        out.display()
    );
    Ok(())
}

fn read_patch(slides: &BTreeMap<String, Slide>, r: &PatchRecord) -> CliResult<RgbImage> {
    let slide = slides
        .get(&r.slide_id)
        .ok_or_else(|| Error::MissingSlide(r.slide_id.clone()))?;
    Ok(read_region(slide, r.level, r.x, r.y, r.size, r.size)?)
}

fn check_manifest_slides(manifest: &PatchManifest, slides: &BTreeMap<String, Slide>) -> CliResult<()> {
    match manifest.slide_ids().into_iter().find(|id| !slides.contains_key(*id)) {
        Some(id) => Err(Error::MissingSlide(id.to_string()).into()),
        None => Ok(()),
    }
}

fn stainfit(
    manifest_path: &Path,
    slide_inputs: &[PathBuf],
    max_patches: Option<usize>,
    out: &Path,
    cfg: &RunConfig,
) -> CliResult<()> {
    let manifest = PatchManifest::read(manifest_path)?;
    if manifest.is_empty() {
        return Err(CliError::Usage("manifest has no patches to fit on".into()));
    }
    let slides = inputs::open_slides(slide_inputs)?;
    check_manifest_slides(&manifest, &slides)?;
    let records = match max_patches {
        Some(n) if n < manifest.len() => sample_unique(&manifest, n, cfg.seed())?,
        _ => manifest.records.clone(),
    };
    let space = cfg.augment.color_space;
    let stats = records
        .par_iter()
        .map(|r| Ok(stain_stats(&read_patch(&slides, r)?, space)))
        .collect::<CliResult<Vec<_>>>()?;
    let template = template_from_stats(&stats, space)?;
    template.write(out, Some(&cfg.hash()?))?;
    eprintln!("fitted {space:?} template on {} patches -> {}", stats.len(), out.display());
    Ok(())
}

fn augment(input: &Path, template: Option<&Path>, out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let template = template.map(StainTemplate::read).transpose()?.map(|(t, _)| t);
    let aug = cfg.augment.to_core(template);
    aug.validate()?;
    let img = RgbImage::load(input)?;
    let view = augment_view(&img, &aug, &mut Rng::new(cfg.seed()))?;
    view.save_png(out)?;
    Ok(())
}

fn embed(manifest_path: &Path, slide_inputs: &[PathBuf], out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let manifest = PatchManifest::read(manifest_path)?;
    let slides = inputs::open_slides(slide_inputs)?;
    check_manifest_slides(&manifest, &slides)?;
    let sets = embed_manifest(&manifest, &slides, cfg)?;
    let hash = cfg.hash()?;
    for set in &sets {
        write_embedding_files(set, out, cfg, &hash)?;
    }
    eprintln!("embedded {} patches from {} slide(s) -> {}", manifest.len(), sets.len(), out.display());
    Ok(())
}

/// Toy-encodes every manifest patch, one set per slide in manifest order.
pub fn embed_manifest(
    manifest: &PatchManifest,
    slides: &BTreeMap<String, Slide>,
    cfg: &RunConfig,
) -> CliResult<Vec<EmbeddingSet>> {
    let encoder = ToyEncoder::new(cfg.seed(), cfg.encoder.dim)?;
    let mut by_slide: BTreeMap<&str, Vec<&PatchRecord>> = BTreeMap::new();
    for r in &manifest.records {
        by_slide.entry(r.slide_id.as_str()).or_default().push(r);
    }
    by_slide
        .into_iter()
        .map(|(slide_id, records)| {
            let rows = records
                .par_iter()
                .map(|r| Ok(encoder.encode(&read_patch(slides, r)?)))
                .collect::<CliResult<Vec<Vec<f32>>>>()?;
            let keys = records.iter().map(|r| r.key()).collect();
            Ok(EmbeddingSet::new(slide_id, encoder.dim(), keys, rows.concat())?)
        })
        .collect()
}

pub fn write_embedding_files(set: &EmbeddingSet, dir: &Path, cfg: &RunConfig, hash: &str) -> CliResult<()> {
    let path = dir.join(format!("{}.hemb", set.slide_id));
    write_embeddings(set, &path)?;
    EmbeddingSidecar {
        slide_id: set.slide_id.clone(),
        encoder: cfg.encoder.kind.clone(),
        dim: set.dim,
        n: set.len(),
        seed: cfg.seed(),
        config_hash: hash.to_string(),
    }
    .write(&dir.join(format!("{}.hemb.json", set.slide_id)))?;
    Ok(())
}

fn pick(set: &LabeledSet, idx: &[usize]) -> LabeledSet {
    set.subset(idx)
}

/// Train/val/test from the items' split tags: all tagged uses them as
/// given (val is carved from train when absent); none tagged uses the
/// configured ratios.
fn probe_splits(items: &[inputs::DatasetItem], labels: &[usize], cfg: &RunConfig) -> CliResult<[Vec<usize>; 3]> {
    let tagged = items.iter().filter(|i| i.split.is_some()).count();
    if tagged == 0 {
        let s = split_dataset(labels, cfg.split.ratios, cfg.seed(), cfg.split.stratify)?;
        return Ok([s.train, s.val, s.test]);
    }
    if tagged != items.len() {
        return Err(CliError::Usage("either every dataset item has a split or none does".into()));
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, item) in items.iter().enumerate() {
        let k = match item.split.expect("tagged") {
            SplitName::Train => 0,
            SplitName::Val => 1,
            SplitName::Test => 2,
        };
        parts[k].push(i);
    }
    if parts[1].is_empty() {
        let (train, val) = holdout_val(&parts[0], cfg.probe.val_frac, cfg.seed())?;
        parts[0] = train;
        parts[1] = val;
    }
    Ok(parts)
}

/// Runs the linear probe on labeled features and writes the report.
pub fn probe_features(
    features: &LabeledSet,
    items: &[inputs::DatasetItem],
    n_classes: usize,
    out: &Path,
    checkpoint: Option<&Path>,
    cfg: &RunConfig,
) -> CliResult<EvalReport> {
    let [train, val, test] = probe_splits(items, &features.labels, cfg)?;
    let pcfg = cfg.probe.to_core(cfg.seed());
    let (model, mut report) = train_linear_probe(
        &pick(features, &train),
        &pick(features, &val),
        &pick(features, &test),
        n_classes,
        &pcfg,
    )?;
    report.config_hash = cfg.hash()?;
    emit_report(&report, out)?;
    if let Some(p) = checkpoint {
        let hyper = serde_json::to_value(&cfg.probe).map_err(Error::from)?;
        Checkpoint::from_linear(&model, hyper, cfg.seed(), report.best_epoch as u64).write(p)?;
    }
    Ok(report)
}

fn probe(features: &Path, dataset: &Path, out: &Path, checkpoint: Option<&Path>, cfg: &RunConfig) -> CliResult<()> {
    let items = inputs::read_dataset(dataset)?;
    let sets = read_embedding_dir(features)?;
    let located = inputs::locate_items(&items, &sets)?;
    let raw: Vec<inputs::LabelValue> = items.iter().map(|i| i.label.clone()).collect();
    let (labels, classes) = inputs::resolve_labels(&raw, &cfg.classes)?;

    let dim = sets.values().next().map_or(0, |s| s.dim);
    if let Some(s) = sets.values().find(|s| s.dim != dim) {
        return Err(Error::DimMismatch { expected: dim, found: s.dim }.into());
    }
    let mut data = Vec::with_capacity(items.len() * dim);
    for (slide, row) in &located {
        data.extend(sets[slide].row(*row).iter().map(|&v| v as f64));
    }
    let features = LabeledSet::new(Matrix::from_vec(items.len(), dim, data)?, labels)?;
    let report = probe_features(&features, &items, classes.len(), out, checkpoint, cfg)?;
    eprintln!(
        "linear probe: test accuracy {:.4} (best epoch {}) -> {}",
        report.metrics["accuracy"],
        report.best_epoch,
        out.display()
    );
    Ok(())
}

fn mil(a: &crate::MilArgs, cfg: &RunConfig) -> CliResult<()> {
    let sets = read_embedding_dir(&a.bags)?;
    let raw_labels = inputs::read_labels(&a.labels)?;
    let slide_ids: Vec<&String> = raw_labels.keys().collect();
    let raw: Vec<inputs::LabelValue> = raw_labels.values().cloned().collect();
    let (indices, classes) = inputs::resolve_labels(&raw, &cfg.classes)?;
    let labels: BTreeMap<String, usize> = slide_ids.into_iter().cloned().zip(indices).collect();

    let bags: Vec<Bag> = match &a.manifest {
        Some(p) => pathbench_core::embed::assemble_bags(&PatchManifest::read(p)?, &sets, &labels)?,
        None => {
            if let Some(id) = sets.keys().find(|id| !labels.contains_key(*id)) {
                return Err(Error::MissingLabel(id.clone()).into());
            }
            if let Some(id) = labels.keys().find(|id| !sets.contains_key(*id)) {
                return Err(Error::MissingSlide(id.clone()).into());
            }
            sets.values()
                .map(|s| {
                    Ok(Bag {
                        slide_id: s.slide_id.clone(),
                        instances: s.to_matrix(),
                        label: labels[&s.slide_id],
                    })
                })
                .collect::<CliResult<_>>()?
        }
    };
    let bag_labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let split = split_dataset(&bag_labels, cfg.split.ratios, cfg.seed(), cfg.split.stratify)?;
    let take = |idx: &[usize]| idx.iter().map(|&i| bags[i].clone()).collect::<Vec<_>>();
    let mcfg = cfg.mil.to_core(cfg.seed());
    let (model, mut report) = train_mil(
        &take(&split.train),
        &take(&split.val),
        &take(&split.test),
        classes.len(),
        &mcfg,
    )?;
    report.config_hash = cfg.hash()?;
    emit_report(&report, &a.out)?;
    if let Some(p) = &a.checkpoint {
        let hyper = json!({ "mil": cfg.mil, "classes": classes });
        Checkpoint::from_mil(&model, hyper, cfg.seed(), report.best_epoch as u64).write(p)?;
    }
    eprintln!(
        "attention MIL: test macro AUC {:.4} (best epoch {}) -> {}",
        report.metrics["macro_auc"],
        report.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn report(path: &Path) -> CliResult<()> {
    let r = read_report(path)?;
    println!("protocol: {}", serde_json::to_value(r.protocol).map_err(Error::from)?.as_str().unwrap_or("?"));
    for (k, v) in &r.metrics {
        println!("{k}: {v:.6}");
    }
    if let Some(per) = &r.per_class_auc {
        let s: Vec<String> = per.iter().map(|v| format!("{v:.6}")).collect();
        println!("per_class_auc: [{}]", s.join(", "));
    }
    println!("best_epoch: {} / {}", r.best_epoch, r.epochs);
    println!(
        "split: train {} / val {} / test {}",
        r.split_sizes.train, r.split_sizes.val, r.split_sizes.test
    );
    println!("seed: {}", r.seed);
    println!("config_hash: {}", r.config_hash);
    Ok(())
}
