//! Deterministic synthetic data: Gaussian-blob features, witness-instance
//! MIL bags and a stained-blob slide for end-to-end runs without real data.

use rayon::prelude::*;

use crate::embed::Bag;
use crate::eval::LabeledSet;
use crate::nn::Matrix;
use crate::{Error, Result, RgbImage, Rng};

/// `n` points in `dim` dimensions, label `i % n_classes`, drawn from unit
/// Gaussians around centers `(separation/√2)·e_c`, so any two centers are
/// `separation` apart. Centers do not depend on `rng`, so sets drawn with
/// different streams share a distribution.
pub fn gaussian_blobs(n: usize, dim: usize, n_classes: usize, separation: f64, rng: &mut Rng) -> Result<LabeledSet> {
    if n_classes == 0 || n_classes > dim {
        return Err(Error::invalid(format!("need 1 <= n_classes ({n_classes}) <= dim ({dim})")));
    }
    let offset = separation / 2f64.sqrt();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        for j in 0..dim {
            let mu = if j == c { offset } else { 0.0 };
            data.push(mu + rng.standard_normal());
        }
        labels.push(c);
    }
    LabeledSet::new(Matrix::from_vec(n, dim, data)?, labels)
}

/// Binary bags of unit-Gaussian noise instances. Bags with label 1 (odd
/// indices) have one instance, at a random position, replaced by a fixed
/// signal vector of norm `strength` whose direction is determined by
/// `signal_seed`.
pub fn witness_bags(
    n_bags: usize,
    bag_size: usize,
    dim: usize,
    strength: f64,
    signal_seed: u64,
    rng: &mut Rng,
) -> Result<Vec<Bag>> {
    if bag_size == 0 || dim == 0 {
        return Err(Error::invalid("bags need at least one instance and one dimension"));
    }
    let mut srng = Rng::new(signal_seed);
    let dir: Vec<f64> = (0..dim).map(|_| srng.standard_normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let signal: Vec<f64> = dir.iter().map(|v| v / norm * strength).collect();

    (0..n_bags)
        .map(|i| {
            let label = i % 2;
            let mut data: Vec<f64> = (0..bag_size * dim).map(|_| rng.standard_normal()).collect();
            if label == 1 {
                let k = rng.below(bag_size as u64) as usize;
                data[k * dim..(k + 1) * dim].copy_from_slice(&signal);
            }
            Ok(Bag {
                slide_id: format!("bag{i:04}"),
                instances: Matrix::from_vec(bag_size, dim, data)?,
                label,
            })
        })
        .collect()
}

/// Tissue colors of the three horizontal bands of [`synthetic_slide`].
pub const BAND_COLORS: [[u8; 3]; 3] = [[214, 120, 178], [160, 82, 168], [104, 62, 148]];
pub const BACKGROUND: [u8; 3] = [242, 240, 244];

/// Band index (the synthetic class label) of a point at height `y`.
pub fn band_of(y: f64, height: u32) -> usize {
    ((y / height as f64 * 3.0).floor().max(0.0) as usize).min(2)
}

/// A square slide: near-white background with dark circular tissue blobs,
/// each colored by its horizontal band, plus ±6 per-channel noise.
pub fn synthetic_slide(size: u32, n_blobs: usize, seed: u64) -> Result<RgbImage> {
    if size < 16 {
        return Err(Error::invalid("synthetic slide needs size >= 16"));
    }
    let mut rng = Rng::new(seed);
    let s = size as f64;
    // Blob i sits wholly inside band i % 3, so every band has tissue.
    let band = s / 3.0;
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|i| {
            let r = rng.uniform(0.04, 0.10) * s;
            let top = (i % 3) as f64 * band;
            (rng.uniform(r, s - r), rng.uniform(top + r, top + band - r), r)
        })
        .collect();
    let noise_seed = rng.next_u64();

    let row_len = size as usize * 3;
    let mut pixels = vec![0u8; row_len * size as usize];
    pixels.par_chunks_mut(row_len).enumerate().for_each(|(y, row)| {
        let yc = y as f64 + 0.5;
        let tissue = BAND_COLORS[band_of(yc, size)];
        let mut inside = vec![false; size as usize];
        for &(cx, cy, r) in &blobs {
            let dy = yc - cy;
            if dy.abs() >= r {
                continue;
            }
            let half = (r * r - dy * dy).sqrt();
            let lo = (cx - half - 0.5).ceil().max(0.0) as usize;
            let hi = ((cx + half - 0.5).floor() as usize).min(size as usize - 1);
            for v in inside.iter_mut().take(hi + 1).skip(lo) {
                *v = true;
            }
        }
        let mut noise = Rng::new(noise_seed).fork(y as u64);
        for (x, px) in row.chunks_exact_mut(3).enumerate() {
            let base = if inside[x] { tissue } else { BACKGROUND };
            let bits = noise.next_u64();
            for (c, v) in px.iter_mut().enumerate() {
                let jitter = ((bits >> (16 * c)) % 13) as i32 - 6;
                *v = (base[c] as i32 + jitter).clamp(0, 255) as u8;
            }
        }
    });
    RgbImage::from_raw(size, size, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_have_requested_shape_and_separation() {
        let s = gaussian_blobs(30, 8, 3, 6.0, &mut Rng::new(1)).unwrap();
        assert_eq!((s.len(), s.dim()), (30, 8));
        assert_eq!(&s.labels[..4], &[0, 1, 2, 0]);
        assert!(gaussian_blobs(3, 2, 3, 6.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn witness_bags_are_balanced_and_seeded() {
        let a = witness_bags(10, 5, 4, 3.0, 7, &mut Rng::new(2)).unwrap();
        let b = witness_bags(10, 5, 4, 3.0, 7, &mut Rng::new(2)).unwrap();
        assert_eq!(a.iter().filter(|b| b.label == 1).count(), 5);
        assert_eq!(a[3].instances, b[3].instances);
        assert_eq!(a[0].instances.rows(), 5);
    }

    #[test]
    fn slide_has_background_and_tissue() {
        let img = synthetic_slide(256, 6, 3).unwrap();
        assert_eq!(img, synthetic_slide(256, 6, 3).unwrap());
        let dark = img.pixels().chunks(3).filter(|p| p[0] < 225).count();
        assert!(dark > 0 && dark < img.pixel_count());
        for (b, color) in BAND_COLORS.iter().enumerate() {
            let rows = (b as u32 * 256 / 3 + 1)..((b as u32 + 1) * 256 / 3);
            let found = rows.flat_map(|y| (0..256).map(move |x| (x, y))).any(|(x, y)| {
                let p = img.get(x, y);
                (0..3).all(|c| (p[c] as i32 - color[c] as i32).abs() <= 6)
            });
            assert!(found, "band {b} has no tissue");
        }
        assert_eq!(band_of(0.0, 300), 0);
        assert_eq!(band_of(299.9, 300), 2);
    }
}
