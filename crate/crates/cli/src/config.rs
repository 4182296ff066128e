//! Run configuration: a TOML file, `--section.key=value` overrides, then
//! named flags, validated as a whole before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pathbench_core::augment::{AugmentConfig, ColorSpace, JitterParams, StainTemplate};
use pathbench_core::eval::{MilConfig, ProbeConfig};
use pathbench_core::json::config_hash;
use pathbench_core::tissue::TilingConfig;

use crate::CliError;

pub const SEED_ENV: &str = "PATHBENCH_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingSection {
    pub patch_size: u32,
    pub min_tissue_fraction: f64,
    pub thumbnail_max_dim: u32,
    pub level: usize,
}

impl Default for TilingSection {
    fn default() -> Self {
        let d = TilingConfig::default();
        Self {
            patch_size: d.patch_size,
            min_tissue_fraction: d.min_tissue_fraction,
            thumbnail_max_dim: d.thumbnail_max_dim,
            level: d.level,
        }
    }
}

impl TilingSection {
    pub fn to_core(&self, seed: u64) -> TilingConfig {
        TilingConfig {
            patch_size: self.patch_size,
            min_tissue_fraction: self.min_tissue_fraction,
            thumbnail_max_dim: self.thumbnail_max_dim,
            level: self.level,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub rotate: bool,
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_stain: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub color_space: ColorSpace,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        Self {
            rotate: d.rotate,
            p_hflip: d.p_hflip,
            p_vflip: d.p_vflip,
            p_stain: d.p_stain,
            brightness: d.jitter.brightness,
            contrast: d.jitter.contrast,
            saturation: d.jitter.saturation,
            hue: d.jitter.hue,
            color_space: ColorSpace::Lab,
        }
    }
}

impl AugmentSection {
    pub fn to_core(&self, template: Option<StainTemplate>) -> AugmentConfig {
        AugmentConfig {
            rotate: self.rotate,
            p_hflip: self.p_hflip,
            p_vflip: self.p_vflip,
            p_stain: self.p_stain,
            template,
            jitter: JitterParams {
                brightness: self.brightness,
                contrast: self.contrast,
                saturation: self.saturation,
                hue: self.hue,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// Only `"toy"` is built in; external encoders write `.hemb` files directly.
    pub kind: String,
    pub dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            kind: "toy".into(),
            dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    pub stratify: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            stratify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub val_frac: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            lr_min: d.lr_min,
            momentum: d.momentum,
            val_frac: d.val_frac,
        }
    }
}

impl ProbeSection {
    pub fn to_core(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_min: self.lr_min,
            momentum: self.momentum,
            val_frac: self.val_frac,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilSection {
    pub epochs: usize,
    pub hidden: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
}

impl Default for MilSection {
    fn default() -> Self {
        let d = MilConfig::default();
        Self {
            epochs: d.epochs,
            hidden: d.hidden,
            lr: d.lr,
            lr_min: d.lr_min,
            weight_decay: d.weight_decay,
        }
    }
}

impl MilSection {
    pub fn to_core(&self, seed: u64) -> MilConfig {
        MilConfig {
            epochs: self.epochs,
            hidden: self.hidden,
            lr: self.lr,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

/// Everything that shapes a run's outputs. Input and output paths are not
/// part of it, so moving files around leaves the hash unchanged.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed for every stochastic stage.
    pub seed: Option<u64>,
    /// Class names in label-index order. Empty means integer labels, or
    /// sorted names when labels are strings.
    pub classes: Vec<String>,
    pub tiling: TilingSection,
    pub augment: AugmentSection,
    pub encoder: EncoderSection,
    pub split: SplitSection,
    pub probe: ProbeSection,
    pub mil: MilSection,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.tiling.to_core(0).validate()?;
        self.augment.to_core(None).validate()?;
        if self.encoder.kind != "toy" {
            return Err(CliError::Config(format!(
                "encoder.kind {:?} is not built in (only \"toy\")",
                self.encoder.kind
            )));
        }
        if self.encoder.dim == 0 {
            return Err(CliError::Config("encoder.dim must be >= 1".into()));
        }
        let r = self.split.ratios;
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(CliError::Config(format!("split.ratios {r:?} must be nonnegative and sum to 1")));
        }
        self.probe.to_core(0).validate()?;
        self.mil.to_core(0).validate()?;
        let mut names = self.classes.clone();
        names.sort();
        names.dedup();
        if names.len() != self.classes.len() {
            return Err(CliError::Config("classes contains duplicates".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(config_hash(self)?)
    }
}

/// Is `arg` a `--section.key[=value]` override?
pub fn is_override(arg: &str) -> bool {
    arg.strip_prefix("--")
        .map(|rest| rest.split('=').next().unwrap_or("").contains('.'))
        .unwrap_or(false)
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `--a.b=value` to `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, arg: &str) -> Result<(), CliError> {
    let body = arg.trim_start_matches("--");
    let (key, raw) = body
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {arg} needs the form --section.key=value")))?;
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed override key {key:?}")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{p} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_scalar(raw));
    Ok(())
}

/// File (if any) → overrides → seed resolution (`--seed`, then the config,
/// then `PATHBENCH_SEED`, then 0). Named subcommand flags are applied by
/// the caller afterwards.
pub fn load(
    path: Option<&Path>,
    overrides: &[String],
    seed_flag: Option<u64>,
    seed_env: Option<&str>,
) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    if let Some(s) = seed_flag {
        cfg.seed = Some(s);
    } else if cfg.seed.is_none() {
        if let Some(raw) = seed_env.filter(|s| !s.is_empty()) {
            let s = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
            cfg.seed = Some(s);
        }
    }
    cfg.seed = Some(cfg.seed());
    Ok(cfg)
}
