//! Training-view augmentations: random-angle rotation, flips, stain
//! re-normalization toward a randomly sampled template, and color jitter.
//! Solarization is intentionally absent.
//!
//! Every randomized operation takes an explicit [`Rng`], so a view is a pure
//! function of `(image, config, seed)`.

use std::borrow::Borrow;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::slide_io::RgbImage;
use crate::tissue::luma_f64;
use crate::{Error, Result, Rng};

/// Lower bound applied to standard deviations in stain transfer.
pub const STAIN_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Color spaces

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Lab,
    Hsv,
}

impl std::str::FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lab" => Ok(ColorSpace::Lab),
            "hsv" => Ok(ColorSpace::Hsv),
            other => Err(Error::invalid(format!("unknown color space {other:?} (expected lab or hsv)"))),
        }
    }
}

// D65 reference white.
const XN: f64 = 0.95047;
const YN: f64 = 1.0;
const ZN: f64 = 1.08883;
const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// 8-bit sRGB → CIE L*a*b* (D65).
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let r = srgb_to_linear(rgb[0] as f64 / 255.0);
    let g = srgb_to_linear(rgb[1] as f64 / 255.0);
    let b = srgb_to_linear(rgb[2] as f64 / 255.0);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (lab_f(x / XN), lab_f(y / YN), lab_f(z / ZN));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// L*a*b* → sRGB in `[0, 1]`, clamped per channel.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let (x, y, z) = (XN * lab_f_inv(fx), YN * lab_f_inv(fy), ZN * lab_f_inv(fz));
    let r = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
    let g = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
    let b = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
    [r, g, b].map(|c| linear_to_srgb(c.clamp(0.0, 1.0)).clamp(0.0, 1.0))
}

/// RGB in `[0, 1]` → HSV with all channels in `[0, 1]` (hue as a turn fraction).
pub fn rgb01_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb01(hsv: [f64; 3]) -> [f64; 3] {
    let h = hsv[0].rem_euclid(1.0) * 6.0;
    let s = hsv[1].clamp(0.0, 1.0);
    let v = hsv[2].clamp(0.0, 1.0);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn to_space(rgb: [u8; 3], space: ColorSpace) -> [f64; 3] {
    match space {
        ColorSpace::Lab => rgb_to_lab(rgb),
        ColorSpace::Hsv => rgb01_to_hsv(rgb.map(|c| c as f64 / 255.0)),
    }
}

fn from_space(v: [f64; 3], space: ColorSpace) -> [u8; 3] {
    let rgb01 = match space {
        ColorSpace::Lab => lab_to_rgb(v),
        ColorSpace::Hsv => hsv_to_rgb01([v[0].rem_euclid(1.0), v[1], v[2]]),
    };
    rgb01.map(to_u8)
}

#[inline]
fn to_u8(c01: f64) -> u8 {
    (c01 * 255.0).round().clamp(0.0, 255.0) as u8
}

#[inline]
fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

// ---------------------------------------------------------------------------
// Geometry

fn require_square(img: &RgbImage) -> Result<()> {
    if img.width() != img.height() {
        return Err(Error::NonSquare {
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(())
}

/// Mirror index `i` into `[0, n)` without repeating the edge sample.
fn reflect(i: i64, n: u32) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as u32
}

/// `(cos, sin)` with exact values at multiples of 90°.
fn cos_sin_deg(angle_deg: f64) -> (f64, f64) {
    let a = angle_deg.rem_euclid(360.0);
    match a {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let r = a.to_radians();
            (r.cos(), r.sin())
        }
    }
}

/// Counter-clockwise rotation about the image center, bilinear sampling,
/// reflect padding, same-size output.
pub fn rotate(img: &RgbImage, angle_deg: f64) -> Result<RgbImage> {
    require_square(img)?;
    let n = img.width();
    let c = (n as f64 - 1.0) / 2.0;
    let (cos, sin) = cos_sin_deg(angle_deg);
    Ok(RgbImage::from_fn(n, n, |x, y| {
        let dx = x as f64 - c;
        let dy = y as f64 - c;
        let sx = c + cos * dx - sin * dy;
        let sy = c + sin * dx + cos * dy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let (xa, xb) = (reflect(x0, n), reflect(x0 + 1, n));
        let (ya, yb) = (reflect(y0, n), reflect(y0 + 1, n));
        let (p00, p10, p01, p11) = (img.get(xa, ya), img.get(xb, ya), img.get(xa, yb), img.get(xb, yb));
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let top = p00[ch] as f64 * (1.0 - fx) + p10[ch] as f64 * fx;
            let bot = p01[ch] as f64 * (1.0 - fx) + p11[ch] as f64 * fx;
            out[ch] = clamp_u8(top * (1.0 - fy) + bot * fy);
        }
        out
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left/right.
    Horizontal,
    /// Mirror top/bottom.
    Vertical,
}

pub fn flip(img: &RgbImage, axis: FlipAxis) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    RgbImage::from_fn(w, h, |x, y| match axis {
        FlipAxis::Horizontal => img.get(w - 1 - x, y),
        FlipAxis::Vertical => img.get(x, h - 1 - y),
    })
}

// ---------------------------------------------------------------------------
// Color jitter

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

impl JitterParams {
    pub const ZERO: JitterParams = JitterParams {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Validation(format!("jitter {name} {v} not in [0, 1)")));
            }
        }
        if !(0.0..0.5).contains(&self.hue) {
            return Err(Error::Validation(format!("jitter hue {} not in [0, 0.5)", self.hue)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum JitterOp {
    Brightness(f64),
    Contrast(f64),
    Saturation(f64),
    Hue(f64),
}

fn map_pixels(img: &RgbImage, f: impl Fn([u8; 3]) -> [u8; 3]) -> RgbImage {
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(3) {
        let v = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&v);
    }
    out
}

fn apply_jitter_op(img: &RgbImage, op: JitterOp) -> RgbImage {
    match op {
        JitterOp::Brightness(f) if f != 1.0 => map_pixels(img, |p| p.map(|v| clamp_u8(v as f64 * f))),
        JitterOp::Contrast(f) if f != 1.0 => {
            let n = img.pixel_count().max(1) as f64;
            let mean = img
                .pixels()
                .chunks_exact(3)
                .map(|p| luma_f64([p[0], p[1], p[2]]))
                .sum::<f64>()
                / n;
            map_pixels(img, |p| p.map(|v| clamp_u8((v as f64 - mean) * f + mean)))
        }
        JitterOp::Saturation(f) if f != 1.0 => map_pixels(img, |p| {
            let g = luma_f64(p);
            p.map(|v| clamp_u8(g + (v as f64 - g) * f))
        }),
        JitterOp::Hue(d) if d != 0.0 => map_pixels(img, |p| {
            let mut hsv = rgb01_to_hsv(p.map(|c| c as f64 / 255.0));
            hsv[0] = (hsv[0] + d).rem_euclid(1.0);
            hsv_to_rgb01(hsv).map(to_u8)
        }),
        _ => img.clone(),
    }
}

/// Brightness/contrast/saturation/hue jitter applied in a seeded random order.
pub fn color_jitter(img: &RgbImage, p: &JitterParams, rng: &mut Rng) -> RgbImage {
    let fb = rng.uniform(1.0 - p.brightness, 1.0 + p.brightness);
    let fc = rng.uniform(1.0 - p.contrast, 1.0 + p.contrast);
    let fs = rng.uniform(1.0 - p.saturation, 1.0 + p.saturation);
    let dh = rng.uniform(-p.hue, p.hue);
    let mut ops = [
        JitterOp::Brightness(fb),
        JitterOp::Contrast(fc),
        JitterOp::Saturation(fs),
        JitterOp::Hue(dh),
    ];
    rng.shuffle(&mut ops);
    ops.iter().fold(img.clone(), |acc, &op| apply_jitter_op(&acc, op))
}

// ---------------------------------------------------------------------------
// Stain statistics and template transfer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

fn converted(img: &RgbImage, space: ColorSpace) -> Vec<[f64; 3]> {
    img.pixels()
        .chunks_exact(3)
        .map(|p| to_space([p[0], p[1], p[2]], space))
        .collect()
}

fn moments(values: &[[f64; 3]]) -> [ChannelStats; 3] {
    let n = values.len().max(1) as f64;
    let mut out = [ChannelStats { mean: 0.0, std: 0.0 }; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mean = values.iter().map(|v| v[c]).sum::<f64>() / n;
        let var = values.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / n;
        *o = ChannelStats { mean, std: var.sqrt() };
    }
    out
}

/// Per-channel mean and population standard deviation in `space`.
pub fn stain_stats(img: &RgbImage, space: ColorSpace) -> [ChannelStats; 3] {
    moments(&converted(img, space))
}

/// Distribution of per-image channel statistics over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTemplate {
    pub mean_of_means: f64,
    pub std_of_means: f64,
    pub mean_of_stds: f64,
    pub std_of_stds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StainTemplate {
    pub color_space: ColorSpace,
    pub channels: [ChannelTemplate; 3],
    pub n_fitted: usize,
}

#[derive(Serialize, Deserialize)]
struct StainTemplateFile {
    color_space: ColorSpace,
    /// Per channel: `[m_mu, s_mu, m_sigma, s_sigma]`.
    channels: [[f64; 4]; 3],
    n_fitted: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl StainTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.n_fitted == 0 {
            return Err(Error::Validation("stain template fitted on zero images".into()));
        }
        for (i, c) in self.channels.iter().enumerate() {
            let all = [c.mean_of_means, c.std_of_means, c.mean_of_stds, c.std_of_stds];
            if all.iter().any(|v| !v.is_finite()) || c.std_of_means < 0.0 || c.std_of_stds < 0.0 || c.mean_of_stds < 0.0 {
                return Err(Error::Validation(format!("stain template channel {i} is invalid: {c:?}")));
            }
        }
        Ok(())
    }

    /// A template that reproduces `stats` exactly (zero spread).
    pub fn fixed(color_space: ColorSpace, stats: [ChannelStats; 3]) -> Self {
        Self {
            color_space,
            channels: stats.map(|s| ChannelTemplate {
                mean_of_means: s.mean,
                std_of_means: 0.0,
                mean_of_stds: s.std,
                std_of_stds: 0.0,
            }),
            n_fitted: 1,
        }
    }

    pub fn to_json(&self, config_hash: Option<&str>) -> Result<String> {
        let file = StainTemplateFile {
            color_space: self.color_space,
            channels: self
                .channels
                .map(|c| [c.mean_of_means, c.std_of_means, c.mean_of_stds, c.std_of_stds]),
            n_fitted: self.n_fitted,
            config_hash: config_hash.map(str::to_string),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    /// Parse a template file; returns the template and its recorded config hash.
    pub fn from_json(text: &str) -> Result<(Self, Option<String>)> {
        let file: StainTemplateFile = serde_json::from_str(text)?;
        let tpl = Self {
            color_space: file.color_space,
            channels: file.channels.map(|a| ChannelTemplate {
                mean_of_means: a[0],
                std_of_means: a[1],
                mean_of_stds: a[2],
                std_of_stds: a[3],
            }),
            n_fitted: file.n_fitted,
        };
        tpl.validate()?;
        Ok((tpl, file.config_hash))
    }

    pub fn write(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        crate::fsutil::atomic_write(path, self.to_json(config_hash)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<(Self, Option<String>)> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fit the template distribution (mean/std of per-image means and stds).
pub fn fit_stain_template<I, T>(corpus: I, space: ColorSpace) -> Result<StainTemplate>
where
    I: IntoIterator<Item = T>,
    T: Borrow<RgbImage>,
{
    let stats: Vec<[ChannelStats; 3]> = corpus.into_iter().map(|img| stain_stats(img.borrow(), space)).collect();
    template_from_stats(&stats, space)
}

/// Template from precomputed per-image statistics (all in `space`).
pub fn template_from_stats(stats: &[[ChannelStats; 3]], space: ColorSpace) -> Result<StainTemplate> {
    if stats.is_empty() {
        return Err(Error::invalid("cannot fit a stain template on an empty corpus"));
    }
    let channels = [0, 1, 2].map(|c| {
        let means: Vec<f64> = stats.iter().map(|s| s[c].mean).collect();
        let stds: Vec<f64> = stats.iter().map(|s| s[c].std).collect();
        let (m_mu, s_mu) = mean_std(&means);
        let (m_sigma, s_sigma) = mean_std(&stds);
        ChannelTemplate {
            mean_of_means: m_mu,
            std_of_means: s_mu,
            mean_of_stds: m_sigma,
            std_of_stds: s_sigma,
        }
    });
    Ok(StainTemplate {
        color_space: space,
        channels,
        n_fitted: stats.len(),
    })
}

/// Per-channel target statistics drawn from the template distribution.
pub fn sample_virtual_template(tpl: &StainTemplate, rng: &mut Rng) -> [ChannelStats; 3] {
    tpl.channels.map(|c| {
        let mean = rng.normal(c.mean_of_means, c.std_of_means);
        let std = rng.normal(c.mean_of_stds, c.std_of_stds).max(STAIN_EPS);
        ChannelStats { mean, std }
    })
}

/// Re-normalize `img` to the given per-channel statistics in `space`.
pub fn transfer_stats(img: &RgbImage, space: ColorSpace, target: &[ChannelStats; 3]) -> RgbImage {
    let values = converted(img, space);
    let src = moments(&values);
    let mut out = Vec::with_capacity(img.pixels().len());
    for v in values {
        let mut t = [0f64; 3];
        for c in 0..3 {
            t[c] = (v[c] - src[c].mean) / src[c].std.max(STAIN_EPS) * target[c].std + target[c].mean;
        }
        out.extend_from_slice(&from_space(t, space));
    }
    RgbImage::from_raw(img.width(), img.height(), out).expect("same size")
}

/// Stain augmentation: sample a virtual template and transfer to it.
pub fn randstainna(img: &RgbImage, tpl: &StainTemplate, rng: &mut Rng) -> RgbImage {
    let target = sample_virtual_template(tpl, rng);
    transfer_stats(img, tpl.color_space, &target)
}

// ---------------------------------------------------------------------------
// Full view

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Random rotation with angle ~ U[0, 360).
    pub rotate: bool,
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Probability of stain augmentation; ignored without a template.
    pub p_stain: f64,
    pub template: Option<StainTemplate>,
    pub jitter: JitterParams,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_stain: 0.5,
            template: None,
            jitter: JitterParams::default(),
        }
    }
}

impl AugmentConfig {
    /// Every stage disabled.
    pub fn identity() -> Self {
        Self {
            rotate: false,
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_stain: 0.0,
            template: None,
            jitter: JitterParams::ZERO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_hflip", self.p_hflip), ("p_vflip", self.p_vflip), ("p_stain", self.p_stain)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} {p} not in [0, 1]")));
            }
        }
        if let Some(t) = &self.template {
            t.validate()?;
        }
        self.jitter.validate()
    }
}

/// Rotation, flips, stain augmentation, then color jitter. Draws are
/// consumed in a fixed order so the view depends only on the rng state.
pub fn augment_view(img: &RgbImage, cfg: &AugmentConfig, rng: &mut Rng) -> Result<RgbImage> {
    require_square(img)?;
    let mut out = if cfg.rotate {
        let angle = rng.uniform(0.0, 360.0);
        rotate(img, angle)?
    } else {
        img.clone()
    };
    if rng.bernoulli(cfg.p_hflip) {
        out = flip(&out, FlipAxis::Horizontal);
    }
    if rng.bernoulli(cfg.p_vflip) {
        out = flip(&out, FlipAxis::Vertical);
    }
    if let Some(tpl) = &cfg.template {
        if rng.bernoulli(cfg.p_stain) {
            out = randstainna(&out, tpl, rng);
        }
    }
    Ok(color_jitter(&out, &cfg.jitter, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: u32, seed: u64) -> RgbImage {
        let mut r = Rng::new(seed);
        RgbImage::from_fn(n, n, |_, _| [r.below(256) as u8, r.below(256) as u8, r.below(256) as u8])
    }

    #[test]
    fn rotate_identity_and_180() {
        let img = noise(7, 1);
        assert_eq!(rotate(&img, 0.0).unwrap(), img);
        assert_eq!(rotate(&img, 360.0).unwrap(), img);
        let r = rotate(&img, 180.0).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                assert_eq!(r.get(x, y), img.get(6 - x, 6 - y));
            }
        }
    }

    #[test]
    fn rotate_90_on_2x2() {
        let (a, b, c, d) = ([1, 1, 1], [2, 2, 2], [3, 3, 3], [4, 4, 4]);
        let img = RgbImage::from_raw(2, 2, [a, b, c, d].concat()).unwrap();
        let r = rotate(&img, 90.0).unwrap();
        assert_eq!(r.pixels(), [b, d, a, c].concat().as_slice());
    }

    #[test]
    fn rotate_rejects_non_square() {
        assert!(matches!(
            rotate(&RgbImage::filled(3, 2, [0, 0, 0]), 10.0),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn rotate_arbitrary_angle_keeps_constant_images() {
        let img = RgbImage::filled(9, 9, [120, 60, 200]);
        assert_eq!(rotate(&img, 33.3).unwrap(), img);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-9, 5), 1);
        assert_eq!(reflect(7, 1), 0);
    }

    #[test]
    fn flips() {
        let row = RgbImage::from_raw(2, 1, vec![1, 1, 1, 2, 2, 2]).unwrap();
        assert_eq!(flip(&row, FlipAxis::Horizontal).pixels(), &[2, 2, 2, 1, 1, 1]);
        let col = RgbImage::from_raw(1, 2, vec![1, 1, 1, 2, 2, 2]).unwrap();
        assert_eq!(flip(&col, FlipAxis::Vertical).pixels(), &[2, 2, 2, 1, 1, 1]);
        let img = noise(5, 2);
        let hv = flip(&flip(&img, FlipAxis::Horizontal), FlipAxis::Vertical);
        assert_eq!(hv, rotate(&img, 180.0).unwrap());
    }

    #[test]
    fn jitter_forced_factors() {
        let img = RgbImage::from_raw(2, 1, vec![100, 100, 100, 200, 200, 200]).unwrap();
        let out = apply_jitter_op(&img, JitterOp::Brightness(2.0));
        assert_eq!(out.pixels(), &[200, 200, 200, 255, 255, 255]);

        let color = noise(6, 3);
        let gray = apply_jitter_op(&color, JitterOp::Saturation(0.0));
        for (p, q) in gray.pixels().chunks(3).zip(color.pixels().chunks(3)) {
            assert_eq!(p[0], p[1]);
            assert_eq!(p[1], p[2]);
            assert_eq!(p[0], luma_f64([q[0], q[1], q[2]]).round() as u8);
        }
    }

    #[test]
    fn contrast_zero_collapses_to_mean_luma() {
        let img = RgbImage::from_raw(2, 1, vec![0, 0, 0, 100, 100, 100]).unwrap();
        let out = apply_jitter_op(&img, JitterOp::Contrast(0.0));
        assert_eq!(out.pixels(), &[50; 6]);
    }

    #[test]
    fn hue_full_turn_is_identity() {
        let img = noise(4, 4);
        let out = apply_jitter_op(&img, JitterOp::Hue(1.0));
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn zero_jitter_is_identity() {
        let img = noise(8, 5);
        let mut rng = Rng::new(9);
        assert_eq!(color_jitter(&img, &JitterParams::ZERO, &mut rng), img);
    }

    #[test]
    fn jitter_param_ranges() {
        assert!(JitterParams::default().validate().is_ok());
        let bad = JitterParams { hue: 0.5, ..JitterParams::ZERO };
        assert!(bad.validate().is_err());
        let bad = JitterParams { brightness: 1.0, ..JitterParams::ZERO };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lab_reference_values() {
        let white = rgb_to_lab([255, 255, 255]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert_eq!(rgb_to_lab([0, 0, 0]), [0.0, 0.0, 0.0]);
        // sRGB red in D65 L*a*b*.
        let red = rgb_to_lab([255, 0, 0]);
        assert!((red[0] - 53.24).abs() < 0.01, "{red:?}");
        assert!((red[1] - 80.09).abs() < 0.02, "{red:?}");
        assert!((red[2] - 67.20).abs() < 0.02, "{red:?}");
    }

    #[test]
    fn color_space_roundtrip() {
        let mut r = Rng::new(6);
        for _ in 0..2000 {
            let p = [r.below(256) as u8, r.below(256) as u8, r.below(256) as u8];
            for space in [ColorSpace::Lab, ColorSpace::Hsv] {
                assert_eq!(from_space(to_space(p, space), space), p, "{space:?}");
            }
        }
    }

    #[test]
    fn stats_examples() {
        let c = RgbImage::filled(4, 4, [10, 200, 30]);
        let s = stain_stats(&c, ColorSpace::Lab);
        let lab = rgb_to_lab([10, 200, 30]);
        for ch in 0..3 {
            assert!(s[ch].std < 1e-9);
            assert!((s[ch].mean - lab[ch]).abs() < 1e-9);
        }

        // Two gray levels whose L* is 40 and 60 respectively.
        let find_gray = |target: f64| {
            (0..=255u8)
                .min_by(|&a, &b| {
                    let da = (rgb_to_lab([a, a, a])[0] - target).abs();
                    let db = (rgb_to_lab([b, b, b])[0] - target).abs();
                    da.total_cmp(&db)
                })
                .unwrap()
        };
        let (g40, g60) = (find_gray(40.0), find_gray(60.0));
        let (l40, l60) = (rgb_to_lab([g40; 3])[0], rgb_to_lab([g60; 3])[0]);
        let img = RgbImage::from_raw(2, 1, [[g40; 3], [g60; 3]].concat()).unwrap();
        let s = stain_stats(&img, ColorSpace::Lab);
        assert!((s[0].mean - (l40 + l60) / 2.0).abs() < 1e-9);
        assert!((s[0].std - (l60 - l40) / 2.0).abs() < 1e-9);
        assert!((s[0].mean - 50.0).abs() < 0.5 && (s[0].std - 10.0).abs() < 0.5);

        let swapped = RgbImage::from_raw(2, 1, [[g60; 3], [g40; 3]].concat()).unwrap();
        assert_eq!(stain_stats(&swapped, ColorSpace::Lab), s);
    }

    #[test]
    fn template_fitting() {
        let img = noise(6, 7);
        for k in 1..4 {
            let t = fit_stain_template(vec![img.clone(); k], ColorSpace::Lab).unwrap();
            assert_eq!(t.n_fitted, k);
            let s = stain_stats(&img, ColorSpace::Lab);
            for c in 0..3 {
                assert!(t.channels[c].std_of_means < 1e-12);
                assert!(t.channels[c].std_of_stds < 1e-12);
                assert!((t.channels[c].mean_of_means - s[c].mean).abs() < 1e-9);
            }
        }
        assert!(fit_stain_template(Vec::<RgbImage>::new(), ColorSpace::Lab).is_err());
    }

    #[test]
    fn template_spread_of_means() {
        // Means 40 and 60 across two images → m_mu 50, s_mu 10 (population).
        let (m, s) = mean_std(&[40.0, 60.0]);
        assert_eq!((m, s), (50.0, 10.0));
    }

    #[test]
    fn transfer_arithmetic() {
        // in mean 50, std 10 → target mean 60, std 5: 70 ↦ (70−50)/10·5+60 = 70.
        let v = (70.0 - 50.0) / 10.0 * 5.0 + 60.0;
        assert_eq!(v, 70.0);
    }

    #[test]
    fn constant_channel_maps_to_target_mean() {
        let img = RgbImage::filled(4, 4, [128, 128, 128]);
        let target = [
            ChannelStats { mean: 70.0, std: 12.0 },
            ChannelStats { mean: 0.0, std: 3.0 },
            ChannelStats { mean: 0.0, std: 3.0 },
        ];
        let out = transfer_stats(&img, ColorSpace::Lab, &target);
        let expect = from_space([70.0, 0.0, 0.0], ColorSpace::Lab);
        assert!(out.pixels().chunks(3).all(|p| p == expect));
    }

    #[test]
    fn identity_template_roundtrip_hsv() {
        let img = noise(16, 8);
        let tpl = StainTemplate::fixed(ColorSpace::Hsv, stain_stats(&img, ColorSpace::Hsv));
        let out = randstainna(&img, &tpl, &mut Rng::new(1));
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn template_json_roundtrip() {
        let t = fit_stain_template([noise(4, 1), noise(4, 2)], ColorSpace::Lab).unwrap();
        let text = t.to_json(Some("abc")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["color_space"], "lab");
        assert_eq!(v["channels"][0].as_array().unwrap().len(), 4);
        let (back, hash) = StainTemplate::from_json(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(hash.as_deref(), Some("abc"));
        assert!(StainTemplate::from_json(r#"{"color_space":"lab","channels":[[0,-1,0,0],[0,0,0,0],[0,0,0,0]],"n_fitted":1}"#).is_err());
    }

    #[test]
    fn identity_view() {
        let img = noise(8, 9);
        let out = augment_view(&img, &AugmentConfig::identity(), &mut Rng::new(3)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn views_are_reproducible() {
        let img = noise(16, 10);
        let cfg = AugmentConfig {
            template: Some(fit_stain_template([noise(16, 11), noise(16, 12)], ColorSpace::Lab).unwrap()),
            p_stain: 1.0,
            ..AugmentConfig::default()
        };
        let a = augment_view(&img, &cfg, &mut Rng::new(77)).unwrap();
        let b = augment_view(&img, &cfg, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
        let c = augment_view(&img, &cfg, &mut Rng::new(78)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flips_only_view_with_both_flips_is_rotate_180() {
        let img = noise(4, 13);
        let cfg = AugmentConfig {
            p_hflip: 0.5,
            p_vflip: 0.5,
            ..AugmentConfig::identity()
        };
        // First seed whose first two draws both fire.
        let seed = (0u64..)
            .find(|&s| {
                let mut r = Rng::new(s);
                r.next_f64() < 0.5 && r.next_f64() < 0.5
            })
            .unwrap();
        let out = augment_view(&img, &cfg, &mut Rng::new(seed)).unwrap();
        assert_eq!(out, rotate(&img, 180.0).unwrap());
    }
}
