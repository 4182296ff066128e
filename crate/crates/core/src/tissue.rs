//! Otsu tissue masking and non-overlapping patch grids.
//!
//! A slide is reduced to a thumbnail, converted to luma, thresholded with a
//! single global Otsu threshold (tissue is darker than glass), and every
//! full grid patch whose footprint is at least `min_tissue_fraction` tissue
//! is kept in a [`PatchManifest`].

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::slide_io::{thumbnail, RgbImage, Slide, DEFAULT_THUMBNAIL_MAX_DIM};
use crate::{json, Error, Result, Rng, TOOL_VERSION};

/// Row-major 8-bit luma.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, values: Vec<u8>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "{width}x{height} gray image needs {} values, got {}",
                width as usize * height as usize,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &v in &self.values {
            h[v as usize] += 1;
        }
        h
    }
}

#[inline]
pub fn luma_f64(rgb: [u8; 3]) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

/// `Y = round(0.299 R + 0.587 G + 0.114 B)` per pixel.
pub fn luma(img: &RgbImage) -> GrayImage {
    let values = img
        .pixels()
        .chunks_exact(3)
        .map(|p| luma_f64([p[0], p[1], p[2]]).round().min(255.0) as u8)
        .collect();
    GrayImage {
        width: img.width(),
        height: img.height(),
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Value(u8),
    /// Between-class variance is zero for every candidate (single-valued image).
    Degenerate,
}

/// Between-class variance `ω0 ω1 (μ0 − μ1)²` for class 0 = values ≤ t,
/// given the class-0 count/sum and the totals. Zero when a class is empty.
#[inline]
pub fn between_class_variance(n0: u64, s0: u64, n: u64, s: u64) -> f64 {
    let n1 = n - n0;
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let w0 = n0 as f64 / n as f64;
    let w1 = n1 as f64 / n as f64;
    let mu0 = s0 as f64 / n0 as f64;
    let mu1 = (s - s0) as f64 / n1 as f64;
    w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
}

/// Otsu threshold of a 256-bin histogram; ties go to the smallest `t`.
pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<Threshold> {
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return Err(Error::EmptyImage);
    }
    let s: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best = (0.0f64, 0u8);
    for (t, &c) in hist.iter().enumerate() {
        n0 += c;
        s0 += t as u64 * c;
        let var = between_class_variance(n0, s0, n, s);
        if var > best.0 {
            best = (var, t as u8);
        }
    }
    Ok(if best.0 > 0.0 {
        Threshold::Value(best.1)
    } else {
        Threshold::Degenerate
    })
}

pub fn otsu_threshold(gray: &GrayImage) -> Result<Threshold> {
    if gray.values.is_empty() {
        return Err(Error::EmptyImage);
    }
    otsu_from_histogram(&gray.histogram())
}

/// Per-pixel tissue flags at thumbnail resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
    pub threshold: Threshold,
    /// Level-0 pixels per mask pixel.
    pub scale_factor: f64,
    integral: Vec<u32>,
}

impl TissueMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>, threshold: Threshold, scale_factor: f64) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::Shape("mask bit count != width * height".into()));
        }
        let bits = if threshold == Threshold::Degenerate {
            vec![false; bits.len()]
        } else {
            bits
        };
        // Summed-area table with a zero row/column border.
        let (w, h) = (width as usize, height as usize);
        let mut integral = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += bits[y * w + x] as u32;
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        Ok(Self {
            width,
            height,
            bits,
            threshold,
            scale_factor,
            integral,
        })
    }

    pub fn tissue_count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    fn count_rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u64 {
        let w = self.width as usize + 1;
        let at = |x: usize, y: usize| self.integral[y * w + x] as i64;
        (at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0)) as u64
    }

    /// Tissue fraction of the level-0 square `[x, x+size) × [y, y+size)`.
    ///
    /// The footprint maps to `[x/s, (x+size)/s)` in mask pixels, rounded
    /// outward to whole pixels and clipped to the mask.
    pub fn fraction_in(&self, x: f64, y: f64, size: f64) -> Result<f64> {
        let s = self.scale_factor;
        let lo = |v: f64| snap(v / s).floor().max(0.0) as usize;
        let hi = |v: f64, lim: u32| (snap(v / s).ceil().max(0.0) as usize).min(lim as usize);
        let (x0, y0) = (lo(x), lo(y));
        let (x1, y1) = (hi(x + size, self.width), hi(y + size, self.height));
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::FootprintOutsideMask);
        }
        let area = ((x1 - x0) * (y1 - y0)) as f64;
        Ok(self.count_rect(x0, y0, x1, y1) as f64 / area)
    }
}

/// Round values within 1e-9 of an integer to that integer, so exact ratios
/// computed in floating point do not spill into a neighbouring pixel.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Tissue ⇔ luma ≤ threshold; a degenerate threshold gives an empty mask.
pub fn tissue_mask(gray: &GrayImage, threshold: Threshold, scale_factor: f64) -> TissueMask {
    let bits = match threshold {
        Threshold::Value(t) => gray.values.iter().map(|&v| v <= t).collect(),
        Threshold::Degenerate => vec![false; gray.values.len()],
    };
    TissueMask::new(gray.width, gray.height, bits, threshold, scale_factor).expect("sizes match")
}

/// Top-left corners of all full `patch_size` tiles, row-major. Partial edge
/// tiles are dropped.
pub fn tile_grid(level_width: u32, level_height: u32, patch_size: u32) -> Result<Vec<(u32, u32)>> {
    if patch_size == 0 {
        return Err(Error::invalid("patch_size must be >= 1"));
    }
    let cols = level_width / patch_size;
    let rows = level_height / patch_size;
    Ok((0..rows)
        .flat_map(|j| (0..cols).map(move |i| (i * patch_size, j * patch_size)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    pub level: usize,
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub tissue_fraction: f64,
}

impl PatchRecord {
    /// Key used to address this patch's row in an embedding file.
    pub fn key(&self) -> String {
        patch_key(self.level, self.x, self.y)
    }
}

pub fn patch_key(level: usize, x: u32, y: u32) -> String {
    format!("({level},{x},{y})")
}

/// Tissue fraction of a patch given in coordinates of its own level.
pub fn patch_tissue_fraction(mask: &TissueMask, patch: &PatchRecord, level_downsample: f64) -> Result<f64> {
    mask.fraction_in(
        patch.x as f64 * level_downsample,
        patch.y as f64 * level_downsample,
        patch.size as f64 * level_downsample,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingConfig {
    pub patch_size: u32,
    pub min_tissue_fraction: f64,
    pub thumbnail_max_dim: u32,
    pub level: usize,
    pub seed: u64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            patch_size: 224,
            min_tissue_fraction: 0.1,
            thumbnail_max_dim: DEFAULT_THUMBNAIL_MAX_DIM,
            level: 0,
            seed: 0,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Validation("patch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(Error::Validation(format!(
                "min_tissue_fraction {} not in [0, 1]",
                self.min_tissue_fraction
            )));
        }
        if self.thumbnail_max_dim < 16 {
            return Err(Error::Validation("thumbnail_max_dim must be >= 16".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        json::config_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchManifest {
    pub records: Vec<PatchRecord>,
    pub config_hash: String,
    pub seed: u64,
}

/// Result of filtering one slide's grid.
#[derive(Debug, Clone)]
pub struct TilingOutcome {
    pub kept: Vec<PatchRecord>,
    pub rejected: usize,
    pub grid_size: usize,
    pub mask: TissueMask,
}

/// Thumbnail → luma → Otsu → mask.
pub fn slide_mask(slide: &Slide, thumbnail_max_dim: u32) -> Result<TissueMask> {
    let (thumb, scale) = thumbnail(slide, thumbnail_max_dim)?;
    let gray = luma(&thumb);
    let t = otsu_threshold(&gray)?;
    Ok(tissue_mask(&gray, t, scale))
}

/// Tile one slide and split its grid into kept and rejected patches.
pub fn tile_slide(slide: &Slide, cfg: &TilingConfig) -> Result<TilingOutcome> {
    cfg.validate()?;
    let level = *slide.level(cfg.level)?;
    let mask = slide_mask(slide, cfg.thumbnail_max_dim)?;
    let grid = tile_grid(level.width, level.height, cfg.patch_size)?;
    let scored: Vec<PatchRecord> = grid
        .par_iter()
        .map(|&(x, y)| {
            let mut rec = PatchRecord {
                slide_id: slide.id().to_string(),
                level: cfg.level,
                x,
                y,
                size: cfg.patch_size,
                tissue_fraction: 0.0,
            };
            rec.tissue_fraction = patch_tissue_fraction(&mask, &rec, level.downsample)?;
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let grid_size = scored.len();
    let kept: Vec<PatchRecord> = scored
        .into_iter()
        .filter(|r| r.tissue_fraction >= cfg.min_tissue_fraction)
        .collect();
    Ok(TilingOutcome {
        rejected: grid_size - kept.len(),
        kept,
        grid_size,
        mask,
    })
}

fn sort_records(records: &mut [PatchRecord]) {
    records.sort_by(|a, b| {
        (a.slide_id.as_str(), a.level, a.y, a.x).cmp(&(b.slide_id.as_str(), b.level, b.y, b.x))
    });
}

/// Manifest of foreground patches for one slide.
pub fn build_manifest(slide: &Slide, cfg: &TilingConfig) -> Result<PatchManifest> {
    build_manifest_multi(std::slice::from_ref(slide), cfg)
}

/// Manifest over several slides; slides are tiled in parallel and the
/// records merged and sorted by `(slide_id, level, y, x)`.
pub fn build_manifest_multi(slides: &[Slide], cfg: &TilingConfig) -> Result<PatchManifest> {
    cfg.validate()?;
    let per_slide: Vec<TilingOutcome> = slides
        .par_iter()
        .map(|s| tile_slide(s, cfg))
        .collect::<Result<_>>()?;
    let mut records: Vec<PatchRecord> = per_slide.into_iter().flat_map(|o| o.kept).collect();
    sort_records(&mut records);
    let manifest = PatchManifest {
        records,
        config_hash: cfg.hash()?,
        seed: cfg.seed,
    };
    manifest.check_unique()?;
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    config_hash: String,
    seed: u64,
    version: String,
}

impl PatchManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert((r.slide_id.as_str(), r.level, r.x, r.y)) {
                return Err(Error::Validation(format!(
                    "duplicate patch {} {}",
                    r.slide_id,
                    r.key()
                )));
            }
        }
        Ok(())
    }

    /// Distinct slide ids in manifest order.
    pub fn slide_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for r in &self.records {
            if ids.last() != Some(&r.slide_id.as_str()) {
                ids.push(&r.slide_id);
            }
        }
        ids
    }

    /// JSON-lines: a header line, then one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            version: TOOL_VERSION.to_string(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Validation("manifest is empty (no header line)".into()))?,
        )?;
        let mut records = Vec::new();
        for line in lines {
            let r: PatchRecord = serde_json::from_str(line)?;
            if !(0.0..=1.0).contains(&r.tissue_fraction) || r.size == 0 || !r.x.is_multiple_of(r.size) || !r.y.is_multiple_of(r.size) {
                return Err(Error::Validation(format!("invalid patch record: {line}")));
            }
            records.push(r);
        }
        let m = PatchManifest {
            records,
            config_hash: header.config_hash,
            seed: header.seed,
        };
        m.check_unique()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_write(path, self.to_jsonl()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

/// Seeded uniform sample of `n` records without replacement.
pub fn sample_unique(manifest: &PatchManifest, n: usize, seed: u64) -> Result<Vec<PatchRecord>> {
    let total = manifest.records.len();
    if n > total {
        return Err(Error::invalid(format!(
            "cannot sample {n} patches from a manifest of {total}"
        )));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    let mut rng = Rng::new(seed);
    // Partial Fisher–Yates: only the first n positions are drawn.
    for i in 0..n {
        let j = i + rng.below((total - i) as u64) as usize;
        idx.swap(i, j);
    }
    Ok(idx[..n].iter().map(|&i| manifest.records[i].clone()).collect())
}
