//! Run configuration: a plain-text `key = value` file plus `--set` overrides.

use std::fmt::{self, Display};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use trfs_core::data::{FEATURE_STRIDE, MIN_SCENE_SIZE, NUM_FOLDS};
use trfs_core::net::{Averaging, BranchMode, GemConfig, NetConfig, PyramidConfig};
use trfs_core::nn::NormPlacement;
use trfs_core::train::Hyper;
use trfs_core::Precision;

use crate::error::{CliError, Result};

/// Which folds a command runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSelection {
    One(usize),
    All,
}

impl FoldSelection {
    pub fn indices(self) -> Vec<usize> {
        match self {
            FoldSelection::One(f) => vec![f],
            FoldSelection::All => (0..NUM_FOLDS).collect(),
        }
    }
}

impl Display for FoldSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldSelection::One(i) => write!(f, "{i}"),
            FoldSelection::All => f.write_str("all"),
        }
    }
}

impl FromStr for FoldSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(FoldSelection::All);
        }
        s.parse().map(FoldSelection::One).map_err(|_| format!("expected a fold index or \"all\", got {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    pub scales: PyramidConfig,
    pub mode: BranchMode,
    pub shots: usize,
    pub base_lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub precision: Precision,
    pub fold: FoldSelection,
    /// Size of the fixed pool of training episodes each fold samples from.
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub output_dir: PathBuf,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub norm: NormPlacement,
    pub averaging: Averaging,
    /// `None` disables gradient clipping.
    pub clip_norm: Option<f64>,
    /// Elements compared per parameter leaf by `gradcheck`; 0 checks all.
    pub gradcheck_probes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hyper = Hyper::default();
        RunConfig {
            seed: 0,
            image_size: 64,
            channels: 32,
            heads: 8,
            mlp_ratio: 4,
            depth: 3,
            scales: PyramidConfig::new(vec![8, 4, 2]).expect("valid default pyramid"),
            mode: BranchMode::Both,
            shots: 1,
            base_lr: hyper.base_lr,
            total_steps: hyper.total_steps,
            batch_size: hyper.batch_size,
            precision: Precision::Fast,
            fold: FoldSelection::One(0),
            train_episodes: 50,
            test_episodes: 500,
            output_dir: PathBuf::from("runs/default"),
            momentum: hyper.momentum,
            weight_decay: hyper.weight_decay,
            poly_power: hyper.poly_power,
            norm: NormPlacement::Pre,
            averaging: Averaging::Probabilities,
            clip_norm: hyper.clip_norm,
            gradcheck_probes: 0,
        }
    }
}

/// Every key, in canonical order.
pub const KEYS: [&str; 24] = [
    "seed",
    "image_size",
    "channels",
    "heads",
    "mlp_ratio",
    "depth",
    "scales",
    "mode",
    "shots",
    "base_lr",
    "total_steps",
    "batch_size",
    "precision",
    "fold",
    "train_episodes",
    "test_episodes",
    "output_dir",
    "momentum",
    "weight_decay",
    "poly_power",
    "norm",
    "averaging",
    "clip_norm",
    "gradcheck_probes",
];

/// Keys that do not change what training produces, so they stay out of
/// the fingerprint.
pub const UNFINGERPRINTED: [&str; 4] = ["output_dir", "test_episodes", "averaging", "gradcheck_probes"];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e| CliError::Config(format!("{key}: {e}")))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "channels" => self.channels.to_string(),
            "heads" => self.heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "depth" => self.depth.to_string(),
            "scales" => self.scales.to_string(),
            "mode" => self.mode.to_string(),
            "shots" => self.shots.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "precision" => self.precision.to_string(),
            "fold" => self.fold.to_string(),
            "train_episodes" => self.train_episodes.to_string(),
            "test_episodes" => self.test_episodes.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "poly_power" => self.poly_power.to_string(),
            "norm" => self.norm.to_string(),
            "averaging" => self.averaging.to_string(),
            "clip_norm" => self.clip_norm.map_or_else(|| "none".into(), |c| c.to_string()),
            "gradcheck_probes" => self.gradcheck_probes.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "scales" => self.scales = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "shots" => self.shots = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "precision" => self.precision = parse(key, v)?,
            "fold" => self.fold = parse(key, v)?,
            "train_episodes" => self.train_episodes = parse(key, v)?,
            "test_episodes" => self.test_episodes = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "poly_power" => self.poly_power = parse(key, v)?,
            "norm" => self.norm = parse(key, v)?,
            "averaging" => self.averaging = parse(key, v)?,
            "clip_norm" => self.clip_norm = if v == "none" { None } else { Some(parse(key, v)?) },
            "gradcheck_probes" => self.gradcheck_probes = parse(key, v)?,
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Overlays the keys of a config file onto `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(CliError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            seen.push(k);
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.merge_text(&text)?;
        Ok(cfg)
    }

    /// All keys in canonical order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("known key"))).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical text of every
    /// key that affects training.
    pub fn fingerprint(&self) -> String {
        let canonical: String = KEYS
            .iter()
            .filter(|k| !UNFINGERPRINTED.contains(k))
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect();
        Sha256::digest(canonical.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            pyramid: self.scales.clone(),
            gem: GemConfig {
                depth: self.depth,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
                width: self.channels,
            },
            mode: self.mode,
            norm: self.norm,
            averaging: self.averaging,
        }
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            poly_power: self.poly_power,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image_size, self.image_size)
    }

    pub fn feature_side(&self) -> usize {
        self.image_size / FEATURE_STRIDE
    }

    /// Checks every precondition the commands rely on.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.image_size < MIN_SCENE_SIZE || !self.image_size.is_multiple_of(FEATURE_STRIDE) {
            return bad(format!(
                "image_size {} must be at least {MIN_SCENE_SIZE} and a multiple of {FEATURE_STRIDE}",
                self.image_size
            ));
        }
        self.net().validate(self.feature_side())?;
        if self.shots == 0 {
            return bad("shots must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.train_episodes == 0 {
            return bad("train_episodes must be at least 1".into());
        }
        if self.test_episodes == 0 {
            return bad("test_episodes must be at least 1".into());
        }
        if let FoldSelection::One(f) = self.fold {
            if f >= NUM_FOLDS {
                return bad(format!("fold {f} out of range 0..{NUM_FOLDS}"));
            }
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return bad(format!("poly_power {} must be positive", self.poly_power));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip_norm {c} must be positive or none"));
            }
        }
        Ok(())
    }
}
