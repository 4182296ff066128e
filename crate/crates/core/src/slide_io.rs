//! Read access to slide imagery: flat PNG/PPM rasters and pyramid
//! directories (`meta.json` + one PNG per level).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use image::{ImageFormat, ImageReader};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default longest side of the thumbnail used for tissue masking.
pub const DEFAULT_THUMBNAIL_MAX_DIM: u32 = 2048;

/// Row-major 8-bit RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RgbImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RgbImage {
    /// Image filled with a single color.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels }
    }

    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Build from a per-pixel function of `(x, y)`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Copy of the `w`×`h` rectangle at `(x, y)`. Caller guarantees bounds.
    fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
        let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
        for row in y..y + h {
            let start = self.offset(x, row);
            pixels.extend_from_slice(&self.pixels[start..start + w as usize * 3]);
        }
        RgbImage { width: w, height: h, pixels }
    }

    /// Decode a PNG or PPM/PNM file.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let reader = ImageReader::open(path)?.with_guessed_format()?;
        match reader.format() {
            Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
            Some(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
            None => {
                return Err(Error::UnsupportedFormat(path.display().to_string()));
            }
        }
        let decoded = reader.decode().map_err(|e| Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_raw(w, h, rgb.into_raw())
    }

    /// Encode as PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut buf,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            ImageFormat::Png,
        )?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_write(path, &self.to_png_bytes()?)
    }
}

/// One resolution of a slide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub width: u32,
    pub height: u32,
    /// Level-0 pixels per pixel of this level.
    pub downsample: f64,
}

/// Pixel source behind a [`Slide`]. Implementations must be safe to share
/// across threads; additional slide readers plug in here.
pub trait SlideBackend: Send + Sync + fmt::Debug {
    fn level_image(&self, level: usize) -> Result<Arc<RgbImage>>;
}

#[derive(Debug)]
struct InMemory {
    levels: Vec<Arc<RgbImage>>,
}

impl SlideBackend for InMemory {
    fn level_image(&self, level: usize) -> Result<Arc<RgbImage>> {
        Ok(Arc::clone(&self.levels[level]))
    }
}

/// Pyramid levels decode lazily, once, on first access.
#[derive(Debug)]
struct PyramidDir {
    files: Vec<PathBuf>,
    dims: Vec<(u32, u32)>,
    cache: Vec<OnceLock<Arc<RgbImage>>>,
}

impl SlideBackend for PyramidDir {
    fn level_image(&self, level: usize) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.cache[level].get() {
            return Ok(Arc::clone(img));
        }
        let img = RgbImage::load(&self.files[level])?;
        let (w, h) = self.dims[level];
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::CorruptHeader {
                path: self.files[level].clone(),
                reason: format!(
                    "metadata says {w}x{h}, file is {}x{}",
                    img.width(),
                    img.height()
                ),
            });
        }
        Ok(Arc::clone(self.cache[level].get_or_init(|| Arc::new(img))))
    }
}

/// An opened slide. Immutable; region reads may run concurrently.
#[derive(Debug, Clone)]
pub struct Slide {
    id: String,
    levels: Vec<Level>,
    backend: Arc<dyn SlideBackend>,
}

#[derive(Debug, Deserialize)]
struct PyramidMeta {
    id: String,
    levels: Vec<PyramidMetaLevel>,
}

#[derive(Debug, Deserialize)]
struct PyramidMetaLevel {
    file: String,
    width: u32,
    height: u32,
}

fn levels_from_dims(dims: &[(u32, u32)]) -> Result<Vec<Level>> {
    let (w0, _) = *dims.first().ok_or_else(|| Error::invalid("slide has no levels"))?;
    let mut levels = Vec::with_capacity(dims.len());
    for (i, &(w, h)) in dims.iter().enumerate() {
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!("level {i} has zero size")));
        }
        if i > 0 {
            let (pw, ph) = dims[i - 1];
            if w >= pw || h > ph {
                return Err(Error::invalid(format!(
                    "levels must be ordered by ascending downsample (level {i} is {w}x{h} after {pw}x{ph})"
                )));
            }
        }
        levels.push(Level {
            width: w,
            height: h,
            downsample: if i == 0 { 1.0 } else { w0 as f64 / w as f64 },
        });
    }
    Ok(levels)
}

impl Slide {
    /// Wrap an in-memory raster as a single-level slide.
    pub fn from_image(id: impl Into<String>, img: RgbImage) -> Self {
        Self::from_level_images(id, vec![img]).expect("single non-empty level")
    }

    /// In-memory pyramid; `images[0]` is full resolution.
    pub fn from_level_images(id: impl Into<String>, images: Vec<RgbImage>) -> Result<Self> {
        let dims: Vec<(u32, u32)> = images.iter().map(|i| (i.width(), i.height())).collect();
        let levels = levels_from_dims(&dims)?;
        Ok(Self {
            id: id.into(),
            levels,
            backend: Arc::new(InMemory {
                levels: images.into_iter().map(Arc::new).collect(),
            }),
        })
    }

    /// Attach a custom backend. `dims` lists level sizes, full resolution first.
    pub fn from_backend(
        id: impl Into<String>,
        dims: &[(u32, u32)],
        backend: Arc<dyn SlideBackend>,
    ) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            levels: levels_from_dims(dims)?,
            backend,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, level: usize) -> Result<&Level> {
        self.levels.get(level).ok_or(Error::InvalidLevel {
            level,
            count: self.levels.len(),
        })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.levels[0].width, self.levels[0].height)
    }

    /// Whole level as an image (shared, not copied).
    pub fn level_image(&self, level: usize) -> Result<Arc<RgbImage>> {
        self.level(level)?;
        self.backend.level_image(level)
    }
}

/// Open a flat raster (PNG/PPM) or a pyramid directory.
pub fn open_slide(path: &Path) -> Result<Slide> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    if path.is_dir() {
        return open_pyramid(path);
    }
    let img = RgbImage::load(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Slide::from_image(id, img))
}

fn open_pyramid(dir: &Path) -> Result<Slide> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::MissingPyramidMeta(meta_path));
    }
    let meta: PyramidMeta =
        serde_json::from_slice(&fs::read(&meta_path)?).map_err(|e| Error::CorruptHeader {
            path: meta_path.clone(),
            reason: e.to_string(),
        })?;
    let mut files = Vec::with_capacity(meta.levels.len());
    let mut dims = Vec::with_capacity(meta.levels.len());
    for lvl in &meta.levels {
        let file = dir.join(&lvl.file);
        if !file.is_file() {
            return Err(Error::NotFound(file));
        }
        // Header-only probe; pixel data is decoded on first read.
        let (w, h) = image::image_dimensions(&file).map_err(|e| Error::CorruptHeader {
            path: file.clone(),
            reason: e.to_string(),
        })?;
        if (w, h) != (lvl.width, lvl.height) {
            return Err(Error::CorruptHeader {
                path: file,
                reason: format!(
                    "metadata says {}x{}, file is {w}x{h}",
                    lvl.width, lvl.height
                ),
            });
        }
        files.push(file);
        dims.push((lvl.width, lvl.height));
    }
    let cache = (0..files.len()).map(|_| OnceLock::new()).collect();
    let backend = PyramidDir {
        files,
        dims: dims.clone(),
        cache,
    };
    Slide::from_backend(meta.id, &dims, Arc::new(backend))
}

/// Write `images` (full resolution first) as a pyramid directory.
pub fn write_pyramid(dir: &Path, id: &str, images: &[RgbImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut levels = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let file = format!("L{i}.png");
        img.save_png(&dir.join(&file))?;
        levels.push(serde_json::json!({"file": file, "width": img.width(), "height": img.height()}));
    }
    let meta = serde_json::json!({"id": id, "levels": levels});
    crate::fsutil::atomic_write(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
}

/// Exact pixel copy of a rectangle at `level`.
pub fn read_region(slide: &Slide, level: usize, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage> {
    let lvl = *slide.level(level)?;
    if w == 0 || h == 0 {
        return Err(Error::EmptyRegion { w, h });
    }
    let fits = x.checked_add(w).is_some_and(|r| r <= lvl.width)
        && y.checked_add(h).is_some_and(|b| b <= lvl.height);
    if !fits {
        return Err(Error::OutOfBounds {
            x,
            y,
            w,
            h,
            width: lvl.width,
            height: lvl.height,
        });
    }
    let img = slide.level_image(level)?;
    Ok(img.crop(x, y, w, h))
}

/// Per-output-index source weights for box-filter resampling of `n_in`
/// samples onto `n_out <= n_in` samples.
pub(crate) fn box_weights(n_in: u32, n_out: u32) -> Vec<(usize, Vec<f64>)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = ((o + 1) as f64 * ratio).min(n_in as f64);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in as usize);
            let mut w = Vec::with_capacity(last - first);
            for i in first..last {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                w.push(overlap / ratio);
            }
            (first, w)
        })
        .collect()
}

/// Area-averaging (box filter) downscale. Constant images stay constant.
pub fn area_resize(img: &RgbImage, out_w: u32, out_h: u32) -> Result<RgbImage> {
    if out_w == 0 || out_h == 0 || out_w > img.width() || out_h > img.height() {
        return Err(Error::invalid(format!(
            "area_resize {}x{} -> {out_w}x{out_h} is not a downscale",
            img.width(),
            img.height()
        )));
    }
    if (out_w, out_h) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    let wx = box_weights(img.width(), out_w);
    let wy = box_weights(img.height(), out_h);
    let row_bytes = out_w as usize * 3;
    let mut out = vec![0u8; row_bytes * out_h as usize];
    out.par_chunks_mut(row_bytes)
        .zip(wy.par_iter())
        .for_each(|(dst, (y0, ywts))| {
            let mut acc = vec![0f64; row_bytes];
            for (dy, &yw) in ywts.iter().enumerate() {
                let sy = (*y0 + dy) as u32;
                for (ox, (x0, xwts)) in wx.iter().enumerate() {
                    let mut px = [0f64; 3];
                    for (dx, &xw) in xwts.iter().enumerate() {
                        let s = img.get((*x0 + dx) as u32, sy);
                        px[0] += xw * s[0] as f64;
                        px[1] += xw * s[1] as f64;
                        px[2] += xw * s[2] as f64;
                    }
                    for c in 0..3 {
                        acc[ox * 3 + c] += yw * px[c];
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = a.round().clamp(0.0, 255.0) as u8;
            }
        });
    RgbImage::from_raw(out_w, out_h, out)
}

/// Thumbnail whose longest side is at most `max_dim`, plus the level-0
/// pixels per thumbnail pixel (`level0_width / output_width`).
///
/// Reads the smallest pyramid level that is still at least the target size
/// and area-averages it down.
pub fn thumbnail(slide: &Slide, max_dim: u32) -> Result<(RgbImage, f64)> {
    if max_dim < 16 {
        return Err(Error::invalid(format!("thumbnail max_dim {max_dim} < 16")));
    }
    let (w0, h0) = slide.dimensions();
    let longest = w0.max(h0);
    let (out_w, out_h) = if longest <= max_dim {
        (w0, h0)
    } else {
        let scale = |v: u32| -> u32 {
            ((v as u64 * max_dim as u64 + longest as u64 / 2) / longest as u64).max(1) as u32
        };
        (scale(w0), scale(h0))
    };
    let level = slide
        .levels()
        .iter()
        .rposition(|l| l.width >= out_w && l.height >= out_h)
        .unwrap_or(0);
    let src = slide.level_image(level)?;
    let thumb = area_resize(&src, out_w, out_h)?;
    Ok((thumb, w0 as f64 / out_w as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
    }

    #[test]
    fn flat_png_has_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s1.png");
        gradient(512, 512).save_png(&p).unwrap();
        let s = open_slide(&p).unwrap();
        assert_eq!(s.id(), "s1");
        assert_eq!(s.levels(), &[Level { width: 512, height: 512, downsample: 1.0 }]);
    }

    #[test]
    fn ppm_is_supported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ppm");
        let mut bytes = b"P6\n3 2\n255\n".to_vec();
        bytes.extend((0..18).map(|i| i as u8 * 10));
        fs::write(&p, bytes).unwrap();
        let s = open_slide(&p).unwrap();
        assert_eq!(s.dimensions(), (3, 2));
        assert_eq!(read_region(&s, 0, 1, 1, 1, 1).unwrap().get(0, 0), [120, 130, 140]);
    }

    #[test]
    fn pyramid_downsamples() {
        let dir = tempfile::tempdir().unwrap();
        let l0 = gradient(64, 32);
        let l1 = area_resize(&l0, 16, 8).unwrap();
        write_pyramid(dir.path(), "pyr", &[l0.clone(), l1]).unwrap();
        let s = open_slide(dir.path()).unwrap();
        assert_eq!(s.id(), "pyr");
        let ds: Vec<f64> = s.levels().iter().map(|l| l.downsample).collect();
        assert_eq!(ds, vec![1.0, 4.0]);
        assert_eq!(read_region(&s, 0, 0, 0, 64, 32).unwrap(), l0);
    }

    #[test]
    fn open_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(open_slide(&missing), Err(Error::NotFound(_))));
        assert!(open_slide(&missing).unwrap_err().to_string().contains("not found"));

        let empty_dir = dir.path().join("pyr");
        fs::create_dir(&empty_dir).unwrap();
        assert!(matches!(open_slide(&empty_dir), Err(Error::MissingPyramidMeta(_))));

        let corrupt = dir.path().join("bad.png");
        fs::write(&corrupt, b"\x89PNG\r\n\x1a\ngarbage").unwrap();
        assert!(matches!(open_slide(&corrupt), Err(Error::CorruptHeader { .. })));

        let txt = dir.path().join("notes.txt");
        fs::write(&txt, b"hello").unwrap();
        assert!(matches!(open_slide(&txt), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn pyramid_meta_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        gradient(8, 8).save_png(&dir.path().join("L0.png")).unwrap();
        fs::write(
            dir.path().join("meta.json"),
            r#"{"id":"x","levels":[{"file":"L0.png","width":16,"height":8}]}"#,
        )
        .unwrap();
        assert!(matches!(open_slide(dir.path()), Err(Error::CorruptHeader { .. })));
    }

    #[test]
    fn region_reads() {
        let img = gradient(40, 30);
        let s = Slide::from_image("g", img.clone());
        assert_eq!(read_region(&s, 0, 0, 0, 40, 30).unwrap(), img);
        let px = read_region(&s, 0, 0, 0, 1, 1).unwrap();
        assert_eq!(px.get(0, 0), img.get(0, 0));
        let r = read_region(&s, 0, 5, 7, 3, 2).unwrap();
        assert_eq!(r.get(2, 1), img.get(7, 8));
        assert!(matches!(read_region(&s, 0, 0, 0, 0, 5), Err(Error::EmptyRegion { .. })));
        assert!(read_region(&s, 0, 0, 0, 0, 5).unwrap_err().to_string().contains("empty region"));
        assert!(matches!(read_region(&s, 0, 38, 0, 3, 1), Err(Error::OutOfBounds { .. })));
        assert!(matches!(read_region(&s, 0, u32::MAX, 0, 3, 1), Err(Error::OutOfBounds { .. })));
        assert!(matches!(read_region(&s, 1, 0, 0, 1, 1), Err(Error::InvalidLevel { .. })));
    }

    #[test]
    fn thumbnail_halving_chain() {
        let s = Slide::from_image("big", RgbImage::filled(8192, 4096, [200, 100, 50]));
        let (t, scale) = thumbnail(&s, 2048).unwrap();
        assert_eq!((t.width(), t.height()), (2048, 1024));
        assert_eq!(scale, 4.0);
        assert!(t.pixels().chunks(3).all(|p| p == [200, 100, 50]));
    }

    #[test]
    fn thumbnail_small_slide_unchanged() {
        let img = gradient(100, 100);
        let s = Slide::from_image("small", img.clone());
        let (t, scale) = thumbnail(&s, 2048).unwrap();
        assert_eq!(t, img);
        assert_eq!(scale, 1.0);
        assert!(thumbnail(&s, 15).is_err());
    }

    #[test]
    fn thumbnail_non_integer_ratio_keeps_aspect() {
        let s = Slide::from_image("odd", RgbImage::filled(1000, 333, [7, 8, 9]));
        let (t, scale) = thumbnail(&s, 128).unwrap();
        assert_eq!(t.width(), 128);
        let expected_h = 333.0 * 128.0 / 1000.0;
        assert!((t.height() as f64 - expected_h).abs() <= 1.0);
        assert_eq!(scale, 1000.0 / 128.0);
        assert!(t.pixels().chunks(3).all(|p| p == [7, 8, 9]));
    }

    #[test]
    fn thumbnail_agrees_across_box_filtered_levels() {
        let l0 = RgbImage::from_fn(256, 256, |x, y| {
            [((x * 7 + y * 3) % 256) as u8, ((x * y) % 251) as u8, ((x ^ y) % 256) as u8]
        });
        let l1 = area_resize(&l0, 128, 128).unwrap();
        let l2 = area_resize(&l1, 64, 64).unwrap();
        let flat = Slide::from_image("f", l0.clone());
        let pyr = Slide::from_level_images("p", vec![l0, l1, l2]).unwrap();
        for max_dim in [64, 32, 16] {
            let (a, sa) = thumbnail(&flat, max_dim).unwrap();
            let (b, sb) = thumbnail(&pyr, max_dim).unwrap();
            assert_eq!(sa, sb);
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                assert!((*x as i32 - *y as i32).abs() <= 1, "max_dim {max_dim}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn concurrent_reads_are_identical() {
        let s = Slide::from_image("c", gradient(64, 64));
        let reads: Vec<RgbImage> = (0..8)
            .into_par_iter()
            .map(|_| read_region(&s, 0, 3, 4, 20, 20).unwrap())
            .collect();
        assert!(reads.windows(2).all(|w| w[0] == w[1]));
    }
}
