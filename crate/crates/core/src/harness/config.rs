//! Run configuration: a flat TOML document with a fixed key set.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::DEFAULT_DROPOUT_PROBS;
use crate::data::{self, Dataset, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::Level;

/// How the ensemble's extra members are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    /// Teacher alone supervises the student.
    None,
    /// Frozen classifier applied to Gaussian-perturbed teacher features.
    Noise,
    /// Trained view heads with the angular losses.
    Angular,
}

impl AugMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AugMode::None => "none",
            AugMode::Noise => "noise",
            AugMode::Angular => "angular",
        }
    }
}

impl std::str::FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugMode::None),
            "noise" => Ok(AugMode::Noise),
            "angular" => Ok(AugMode::Angular),
            other => Err(Error::param(format!("unknown aug_mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub teacher_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,

    pub n_views: usize,
    /// Per-view dropout probabilities; when absent view `i` uses `0.2 + 0.05·i`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout_probs: Option<Vec<f64>>,
    pub tau_z: f64,
    pub tau_c: f64,
    pub gamma_init: f64,
    pub tau_feat: f64,
    pub level: Level,
    pub aug_mode: AugMode,
    /// Teacher first, then one weight per view; uniform when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_weights: Option<Vec<f64>>,
    pub noise_sigma: f64,
    pub use_inter: bool,
    pub use_intra: bool,

    pub teacher_hidden: Vec<usize>,
    pub teacher_feature_dim: usize,
    pub student_hidden: Vec<usize>,
    pub student_feature_dim: usize,

    pub data_kind: SyntheticKind,
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub data_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    pub imbalance_classes: Vec<usize>,
    pub imbalance_cap: usize,
    pub train_fraction: f64,
}

/// Noise level of the default `blobs-hard` benchmark.
pub const BLOBS_HARD_SPREAD: f64 = 1.0;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 60,
            warmup_epochs: 8,
            teacher_epochs: 60,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            lr_milestones: vec![35, 45, 55],
            lr_decay: 0.1,
            n_views: 5,
            dropout_probs: None,
            tau_z: 4.0,
            tau_c: 0.07,
            gamma_init: 0.2,
            tau_feat: 0.07,
            level: Level::Logit,
            aug_mode: AugMode::Angular,
            ensemble_weights: None,
            noise_sigma: 0.1,
            use_inter: true,
            use_intra: true,
            teacher_hidden: vec![128, 128],
            teacher_feature_dim: 64,
            student_hidden: vec![32, 32],
            student_feature_dim: 32,
            data_kind: SyntheticKind::Blobs,
            num_classes: 20,
            input_dim: 32,
            train_per_class: 100,
            test_per_class: 50,
            spread: BLOBS_HARD_SPREAD,
            data_seed: 0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            imbalance_classes: Vec::new(),
            imbalance_cap: 50,
            train_fraction: 1.0,
        }
    }
}

/// `⌊m · to / from⌋` for each milestone, deduplicated and kept below `to`.
pub fn scale_milestones(milestones: &[usize], from: usize, to: usize) -> Vec<usize> {
    let mut out: Vec<usize> = milestones
        .iter()
        .map(|&m| m * to / from.max(1))
        .filter(|&m| m > 0 && m < to)
        .collect();
    out.dedup();
    out
}

impl TrainConfig {
    /// Full-length schedule: 240 epochs, decay at 150/180/210, 30 warm-up epochs.
    pub fn full_schedule() -> Self {
        TrainConfig {
            epochs: 240,
            warmup_epochs: 30,
            teacher_epochs: 240,
            lr_milestones: vec![150, 180, 210],
            ..TrainConfig::default()
        }
    }

    /// Same run with `epochs` distillation epochs; milestones and warm-up
    /// shrink proportionally (warm-up rounds down, minimum 1).
    pub fn scaled_to(&self, epochs: usize) -> Self {
        let mut c = self.clone();
        c.lr_milestones = scale_milestones(&self.lr_milestones, self.epochs, epochs);
        c.warmup_epochs = if self.warmup_epochs == 0 {
            0
        } else {
            (self.warmup_epochs * epochs / self.epochs.max(1)).max(1)
        };
        c.epochs = epochs;
        c
    }

    /// Teacher pretraining milestones: the distillation milestones rescaled
    /// to `teacher_epochs`.
    pub fn teacher_milestones(&self) -> Vec<usize> {
        scale_milestones(&self.lr_milestones, self.epochs, self.teacher_epochs)
    }

    /// Number of ensemble views actually built for the configured mode.
    pub fn active_views(&self) -> usize {
        match self.aug_mode {
            AugMode::None => 0,
            _ => self.n_views,
        }
    }

    pub fn view_dropout_probs(&self) -> Vec<f64> {
        match &self.dropout_probs {
            Some(p) => p.clone(),
            None => (0..self.n_views)
                .map(|i| DEFAULT_DROPOUT_PROBS.get(i).copied().unwrap_or((0.2 + 0.05 * i as f64).min(0.9)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::param(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.teacher_epochs == 0 {
            return bad("teacher_epochs must be at least 1".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_milestones {:?} must be strictly increasing", self.lr_milestones));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!("lr_milestones {:?} must lie below epochs {}", self.lr_milestones, self.epochs));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        for (name, v) in [("lr", self.lr), ("tau_z", self.tau_z), ("tau_c", self.tau_c), ("tau_feat", self.tau_feat)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..=1.0).contains(&self.gamma_init) {
            return bad(format!("gamma_init must lie in [0, 1], got {}", self.gamma_init));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        if self.aug_mode != AugMode::None && self.n_views == 0 {
            return bad(format!("aug_mode {} needs n_views >= 1", self.aug_mode.as_str()));
        }
        let probs = self.view_dropout_probs();
        if probs.len() != self.n_views {
            return bad(format!("{} dropout_probs for {} views", probs.len(), self.n_views));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return bad(format!("dropout probability {p} outside [0, 1)"));
        }
        if let Some(w) = &self.ensemble_weights {
            if w.len() != self.active_views() + 1 {
                return bad(format!("ensemble_weights needs {} entries, got {}", self.active_views() + 1, w.len()));
            }
        }
        if self.num_classes < 2 || self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("need at least 2 classes and one train and test sample per class".into());
        }
        if self.teacher_feature_dim == 0 || self.student_feature_dim == 0 || self.input_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(self.spread >= 0.0) {
            return bad(format!("spread must be nonnegative, got {}", self.spread));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction must lie in (0, 1], got {}", self.train_fraction));
        }
        let idx = [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels];
        let given = idx.iter().filter(|p| p.is_some()).count();
        if given != 0 && given != 4 {
            return bad("IDX input needs all of train_images, train_labels, test_images, test_labels".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::param(format!("config: {}", e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Reads a config file; missing keys take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::param(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides. Values are parsed as TOML and fall back
    /// to plain strings, so `aug_mode=angular` and `lr=0.05` both work.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Format(format!("config: {e}")))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::param(format!("override {item:?} is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            table.insert(key.to_string(), value);
        }
        table.try_into().map_err(|e: toml::de::Error| Error::param(format!("override: {}", e.message())))
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            kind: self.data_kind,
            num_classes: self.num_classes,
            samples_per_class: self.train_per_class + self.test_per_class,
            input_dim: self.input_dim,
            spread: self.spread,
            seed: self.data_seed,
        }
    }
}

/// Builds the standardized train and test sets a config describes.
///
/// Blobs draw train and test from the same centres (first `train_per_class`
/// draws of each class train). Spirals draw the test set from `data_seed + 1`
/// because arm samples are ordered by radius. Imbalance and fraction
/// protocols then apply to the train split only.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match (&cfg.train_images, &cfg.train_labels, &cfg.test_images, &cfg.test_labels) {
        (Some(ti), Some(tl), Some(vi), Some(vl)) => {
            let mut train = data::load_idx(ti, tl)?;
            let mut test = data::load_idx(vi, vl)?;
            let c = train.num_classes.max(test.num_classes);
            train.num_classes = c;
            test.num_classes = c;
            (train, test)
        }
        _ => match cfg.data_kind {
            SyntheticKind::Blobs => data::blobs_split(
                cfg.num_classes,
                cfg.input_dim,
                cfg.train_per_class,
                cfg.test_per_class,
                cfg.spread,
                cfg.data_seed,
            )?,
            SyntheticKind::Spirals => {
                let spec = |per, seed| SyntheticSpec {
                    samples_per_class: per,
                    seed,
                    ..cfg.synthetic_spec()
                };
                let mut train = data::gen_synthetic(&spec(cfg.train_per_class, cfg.data_seed))?;
                let mut test = data::gen_synthetic(&spec(cfg.test_per_class, cfg.data_seed.wrapping_add(1)))?;
                train.name = "spirals-train".into();
                test.name = "spirals-test".into();
                (train, test)
            }
        },
    };
    if !cfg.imbalance_classes.is_empty() {
        let set: BTreeSet<usize> = cfg.imbalance_classes.iter().copied().collect();
        train = data::make_imbalanced(&train, &set, cfg.imbalance_cap)?;
    }
    if cfg.train_fraction < 1.0 {
        train = data::take_fraction(&train, cfg.train_fraction)?;
    }
    if train.len() < 2 {
        return Err(Error::param(format!("training set has {} samples", train.len())));
    }
    data::standardize(&mut train, &mut [&mut test]);
    Ok((train, test))
}
