//! Patch features: the `.hemb` container, a deterministic toy encoder for
//! offline runs, and MIL bag assembly.
//!
//! `.hemb` layout (little-endian):
//!
//! ```text
//! "HEMB" | version u32 = 1 | dim u32 | n u64 | key-block length u64
//!        | key block: JSON array of n UTF-8 key strings
//!        | n * dim float32, row-major
//! ```
//!
//! Any external encoder participates in the evaluation protocols by writing
//! one `.hemb` file per slide, with keys produced by
//! [`crate::tissue::patch_key`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Matrix;
use crate::slide_io::{box_weights, RgbImage};
use crate::tissue::{luma_f64, PatchManifest};
use crate::{Error, Result, Rng};

pub const HEMB_MAGIC: [u8; 4] = *b"HEMB";
pub const HEMB_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8;

/// Grid size of the luma thumbnail inside toy features.
const TOY_GRID: u32 = 16;
/// Raw toy feature length: 3 means + 3 stds + 16×16 luma cells.
pub const TOY_RAW_DIM: usize = 6 + (TOY_GRID * TOY_GRID) as usize;

/// Per-slide feature matrix with one row per patch key.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub slide_id: String,
    pub dim: usize,
    pub keys: Vec<String>,
    /// `keys.len() × dim`, row-major.
    pub values: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(slide_id: impl Into<String>, dim: usize, keys: Vec<String>, values: Vec<f32>) -> Result<Self> {
        let set = Self {
            slide_id: slide_id.into(),
            dim,
            keys,
            values,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("embedding dim must be >= 1".into()));
        }
        if self.values.len() != self.keys.len() * self.dim {
            return Err(Error::Shape(format!(
                "{} keys x dim {} != {} values",
                self.keys.len(),
                self.dim,
                self.values.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.keys.len());
        for k in &self.keys {
            if !seen.insert(k.as_str()) {
                return Err(Error::Validation(format!("duplicate key {k} in slide {}", self.slide_id)));
            }
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value in slide {} row {} column {}",
                self.slide_id,
                i / self.dim,
                i % self.dim
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn key_index(&self) -> HashMap<&str, usize> {
        self.keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect()
    }

    /// All rows widened to 64-bit.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.dim, self.values.iter().map(|&v| v as f64).collect())
            .expect("validated shape")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let key_block = serde_json::to_vec(&self.keys)?;
        let mut out = Vec::with_capacity(HEADER_LEN + key_block.len() + self.values.len() * 4);
        out.extend_from_slice(&HEMB_MAGIC);
        out.extend_from_slice(&HEMB_VERSION.to_le_bytes());
        let dim = u32::try_from(self.dim).map_err(|_| Error::Validation("dim exceeds u32".into()))?;
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        out.extend_from_slice(&(key_block.len() as u64).to_le_bytes());
        out.extend_from_slice(&key_block);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(slide_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let need = |expected: usize| -> Result<()> {
            if bytes.len() < expected {
                Err(Error::TruncatedPayload {
                    expected: expected as u64,
                    found: bytes.len() as u64,
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != HEMB_MAGIC {
            return Err(Error::BadMagic {
                expected: HEMB_MAGIC,
                found: magic,
            });
        }
        need(8)?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != HEMB_VERSION {
            return Err(Error::VersionMismatch {
                expected: HEMB_VERSION,
                found: version,
            });
        }
        need(HEADER_LEN)?;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let key_len = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let overflow = || Error::Validation("embedding header sizes overflow".into());
        let keys_end = HEADER_LEN
            .checked_add(usize::try_from(key_len).map_err(|_| overflow())?)
            .ok_or_else(overflow)?;
        need(keys_end)?;
        let keys: Vec<String> = serde_json::from_slice(&bytes[HEADER_LEN..keys_end])?;
        if keys.len() as u64 != n {
            return Err(Error::KeyCountMismatch { header: n, keys: keys.len() });
        }
        let payload = keys
            .len()
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(overflow)?;
        let end = keys_end.checked_add(payload).ok_or_else(overflow)?;
        need(end)?;
        if bytes.len() > end {
            return Err(Error::Validation(format!(
                "{} trailing bytes after embedding payload",
                bytes.len() - end
            )));
        }
        let values = bytes[keys_end..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(slide_id, dim, keys, values)
    }
}

/// Write `set` to `path` atomically.
pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    crate::fsutil::atomic_write(path, &set.to_bytes()?)
}

/// Read a `.hemb` file; the slide id is the file stem.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let slide_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EmbeddingSet::from_bytes(slide_id, &fs::read(path)?)
}

/// Read every `*.hemb` in `dir`, keyed by slide id.
pub fn read_embedding_dir(dir: &Path) -> Result<BTreeMap<String, EmbeddingSet>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "hemb") {
            let set = read_embeddings(&path)?;
            out.insert(set.slide_id.clone(), set);
        }
    }
    Ok(out)
}

/// Provenance written next to each `.hemb` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub slide_id: String,
    pub encoder: String,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EmbeddingSidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_write(path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }
}

/// Fixed random projection of simple color/texture statistics. Stands in for
/// a pretrained encoder so the whole pipeline can run without weights.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    dim: usize,
    projection: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("toy encoder dim must be >= 1"));
        }
        let mut rng = Rng::new(seed);
        let scale = 1.0 / (TOY_RAW_DIM as f64).sqrt();
        let projection = (0..dim * TOY_RAW_DIM).map(|_| rng.standard_normal() * scale).collect();
        Ok(Self { dim, projection })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unprojected 262-long feature vector.
    pub fn raw_features(patch: &RgbImage) -> Vec<f64> {
        let n = patch.pixel_count().max(1) as f64;
        let mut v = Vec::with_capacity(TOY_RAW_DIM);
        let mut means = [0f64; 3];
        for p in patch.pixels().chunks_exact(3) {
            for c in 0..3 {
                means[c] += p[c] as f64;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = [0f64; 3];
        for p in patch.pixels().chunks_exact(3) {
            for c in 0..3 {
                vars[c] += (p[c] as f64 - means[c]).powi(2);
            }
        }
        v.extend(means.iter().map(|m| m / 255.0));
        v.extend(vars.iter().map(|s| (s / n).sqrt() / 255.0));

        let wx = box_weights(patch.width(), TOY_GRID);
        let wy = box_weights(patch.height(), TOY_GRID);
        for (y0, ywts) in &wy {
            for (x0, xwts) in &wx {
                let mut acc = 0.0;
                for (dy, yw) in ywts.iter().enumerate() {
                    for (dx, xw) in xwts.iter().enumerate() {
                        acc += yw * xw * luma_f64(patch.get((x0 + dx) as u32, (y0 + dy) as u32));
                    }
                }
                v.push(acc / 255.0);
            }
        }
        v
    }

    pub fn encode(&self, patch: &RgbImage) -> Vec<f32> {
        let raw = Self::raw_features(patch);
        self.projection
            .chunks_exact(TOY_RAW_DIM)
            .map(|row| row.iter().zip(&raw).map(|(m, x)| m * x).sum::<f64>() as f32)
            .collect()
    }
}

/// One-shot toy encoding; prefer [`ToyEncoder`] when encoding many patches.
pub fn toy_encode(patch: &RgbImage, seed: u64, dim: usize) -> Result<Vec<f32>> {
    Ok(ToyEncoder::new(seed, dim)?.encode(patch))
}

/// One slide's instances with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    /// `n × dim`, widened to 64-bit.
    pub instances: Matrix,
    pub label: usize,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.instances.cols()
    }
}

/// One bag per manifest slide, rows in manifest order.
pub fn assemble_bags(
    manifest: &PatchManifest,
    embeddings: &BTreeMap<String, EmbeddingSet>,
    labels: &BTreeMap<String, usize>,
) -> Result<Vec<Bag>> {
    let mut bags = Vec::new();
    let mut dim: Option<usize> = None;
    let mut by_slide: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in &manifest.records {
        by_slide.entry(&r.slide_id).or_default().push(r.key());
    }
    for slide in manifest.slide_ids() {
        let set = embeddings
            .get(slide)
            .ok_or_else(|| Error::MissingSlide(slide.to_string()))?;
        let label = *labels.get(slide).ok_or_else(|| Error::MissingLabel(slide.to_string()))?;
        match dim {
            Some(d) if d != set.dim => return Err(Error::DimMismatch { expected: d, found: set.dim }),
            _ => dim = Some(set.dim),
        }
        let index = set.key_index();
        let keys = &by_slide[slide];
        let mut data = Vec::with_capacity(keys.len() * set.dim);
        for key in keys {
            let row = *index.get(key.as_str()).ok_or_else(|| Error::MissingKey {
                slide: slide.to_string(),
                key: key.clone(),
            })?;
            data.extend(set.row(row).iter().map(|&v| v as f64));
        }
        bags.push(Bag {
            slide_id: slide.to_string(),
            instances: Matrix::from_vec(keys.len(), set.dim, data)?,
            label,
        });
    }
    Ok(bags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tissue::PatchRecord;

    fn sample_set() -> EmbeddingSet {
        EmbeddingSet::new(
            "s1",
            3,
            vec!["(0,0,0)".into(), "(0,224,0)".into()],
            vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0],
        )
        .unwrap()
    }

    #[test]
    fn bytes_roundtrip_bit_exact() {
        let s = sample_set();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(&bytes[..4], &[0x48, 0x45, 0x4D, 0x42]);
        let back = EmbeddingSet::from_bytes("s1", &bytes).unwrap();
        assert_eq!(back.keys, s.keys);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.values), bits(&s.values));
    }

    #[test]
    fn header_layout() {
        let bytes = sample_set().to_bytes().unwrap();
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        let key_len = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        assert_eq!(&bytes[28..28 + key_len], br#"["(0,0,0)","(0,224,0)"]"#);
        assert_eq!(bytes.len(), 28 + key_len + 6 * 4);
    }

    #[test]
    fn decode_errors() {
        let bytes = sample_set().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingSet::from_bytes("s", &bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            EmbeddingSet::from_bytes("s", &bad),
            Err(Error::VersionMismatch { expected: 1, found: 2 })
        ));
        let err = EmbeddingSet::from_bytes("s", &bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { .. }));
        assert!(err.to_string().contains("truncated payload"));
        let mut bad = bytes.clone();
        bad[12] = 3;
        assert!(matches!(
            EmbeddingSet::from_bytes("s", &bad),
            Err(Error::KeyCountMismatch { header: 3, keys: 2 })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(EmbeddingSet::from_bytes("s", &long).is_err());
        assert!(matches!(EmbeddingSet::from_bytes("s", b"HE"), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn invalid_sets_rejected() {
        assert!(EmbeddingSet::new("s", 0, vec![], vec![]).is_err());
        assert!(EmbeddingSet::new("s", 1, vec!["a".into(), "a".into()], vec![0.0, 1.0]).is_err());
        assert!(EmbeddingSet::new("s", 1, vec!["a".into()], vec![f32::NAN]).is_err());
        assert!(EmbeddingSet::new("s", 2, vec!["a".into()], vec![0.0]).is_err());
    }

    #[test]
    fn file_roundtrip_uses_stem_as_slide_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("slideA.hemb");
        let mut s = sample_set();
        s.slide_id = "slideA".into();
        write_embeddings(&s, &p).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), s);
        let all = read_embedding_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 1);
    }

    #[test]
    fn toy_encoder_properties() {
        let mut r = Rng::new(4);
        let patch = RgbImage::from_fn(32, 32, |_, _| [r.below(256) as u8, r.below(256) as u8, r.below(256) as u8]);
        let a = toy_encode(&patch, 1, 64).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, toy_encode(&patch, 1, 64).unwrap());
        assert_ne!(a, toy_encode(&patch, 2, 64).unwrap());
        let black = RgbImage::filled(32, 32, [0, 0, 0]);
        assert!(toy_encode(&black, 1, 16).unwrap().iter().all(|&v| v == 0.0));
        assert!(toy_encode(&patch, 1, 0).is_err());
        assert_eq!(ToyEncoder::raw_features(&patch).len(), 262);
    }

    #[test]
    fn toy_encoder_is_invariant_to_within_cell_permutation() {
        // 32×32 patch: each 16×16 grid cell is a 2×2 pixel block.
        let mut r = Rng::new(5);
        let a = RgbImage::from_fn(32, 32, |_, _| [r.below(256) as u8, r.below(256) as u8, r.below(256) as u8]);
        let mut b = a.clone();
        for cy in 0..16 {
            for cx in 0..16 {
                // Rotate the four pixels of the cell.
                let (x, y) = (cx * 2, cy * 2);
                let (p00, p10, p01, p11) = (a.get(x, y), a.get(x + 1, y), a.get(x, y + 1), a.get(x + 1, y + 1));
                b.set(x, y, p10);
                b.set(x + 1, y, p11);
                b.set(x + 1, y + 1, p01);
                b.set(x, y + 1, p00);
            }
        }
        assert_ne!(a, b);
        let (ra, rb) = (ToyEncoder::raw_features(&a), ToyEncoder::raw_features(&b));
        for i in 0..6 {
            assert!((ra[i] - rb[i]).abs() < 1e-12);
        }
        let enc = ToyEncoder::new(3, 24).unwrap();
        let (ea, eb) = (enc.encode(&a), enc.encode(&b));
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() < 1e-5);
        }
        // Moving a pixel across cells changes the cell averages.
        let mut c = a.clone();
        let (p, q) = (a.get(0, 0), a.get(31, 31));
        c.set(0, 0, q);
        c.set(31, 31, p);
        if luma_f64(p) != luma_f64(q) {
            assert_ne!(enc.encode(&a), enc.encode(&c));
        }
    }

    fn manifest_for(slide: &str, coords: &[(u32, u32)]) -> PatchManifest {
        PatchManifest {
            records: coords
                .iter()
                .map(|&(x, y)| PatchRecord {
                    slide_id: slide.into(),
                    level: 0,
                    x,
                    y,
                    size: 224,
                    tissue_fraction: 1.0,
                })
                .collect(),
            config_hash: String::new(),
            seed: 0,
        }
    }

    #[test]
    fn bags_follow_manifest_order() {
        let m = manifest_for("s1", &[(224, 0), (0, 224), (0, 0)]);
        let set = EmbeddingSet::new(
            "s1",
            2,
            vec!["(0,0,0)".into(), "(0,224,0)".into(), "(0,0,224)".into()],
            vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
        )
        .unwrap();
        let embeds = BTreeMap::from([("s1".to_string(), set)]);
        let labels = BTreeMap::from([("s1".to_string(), 1usize)]);
        let bags = assemble_bags(&m, &embeds, &labels).unwrap();
        assert_eq!(bags.len(), 1);
        assert_eq!(bags[0].len(), 3);
        assert_eq!(bags[0].label, 1);
        assert_eq!(bags[0].instances.row(0), &[1.0, 1.5]);
        assert_eq!(bags[0].instances.row(1), &[2.0, 2.5]);
        assert_eq!(bags[0].instances.row(2), &[0.0, 0.5]);
    }

    #[test]
    fn bag_errors() {
        let m = manifest_for("s1", &[(0, 0), (224, 0)]);
        let set = EmbeddingSet::new("s1", 1, vec!["(0,0,0)".into()], vec![1.0]).unwrap();
        let embeds = BTreeMap::from([("s1".to_string(), set)]);
        let labels = BTreeMap::from([("s1".to_string(), 0usize)]);
        let err = assemble_bags(&m, &embeds, &labels).unwrap_err();
        assert!(err.to_string().contains("s1") && err.to_string().contains("(0,224,0)"), "{err}");

        assert!(matches!(
            assemble_bags(&m, &BTreeMap::new(), &labels),
            Err(Error::MissingSlide(_))
        ));
        assert!(matches!(
            assemble_bags(&m, &embeds, &BTreeMap::new()),
            Err(Error::MissingLabel(_))
        ));

        let mut two = manifest_for("a", &[(0, 0)]);
        two.records.extend(manifest_for("b", &[(0, 0)]).records);
        let embeds = BTreeMap::from([
            ("a".to_string(), EmbeddingSet::new("a", 64, vec!["(0,0,0)".into()], vec![0.0; 64]).unwrap()),
            ("b".to_string(), EmbeddingSet::new("b", 32, vec!["(0,0,0)".into()], vec![0.0; 32]).unwrap()),
        ]);
        let labels = BTreeMap::from([("a".to_string(), 0usize), ("b".to_string(), 1usize)]);
        let err = assemble_bags(&two, &embeds, &labels).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { expected: 64, found: 32 }));
        assert!(err.to_string().contains("dim mismatch"));
    }
}
