use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{NoiseKind, NoiseSpec, Sampling};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::selfloop::{EarlyStopConfig, FilterMode, OptimizerConfig};

use super::Variant;

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Blobs {
        classes: usize,
        /// Training samples per class.
        per_class: usize,
        dim: usize,
        spread: f64,
        val_per_class: usize,
        test_per_class: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        val: usize,
        test: usize,
        /// Cap on training samples after the test and validation carve-outs.
        train_limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        val: usize,
        test: usize,
        train_limit: Option<usize>,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Blobs {
            classes: 10,
            per_class: 500,
            dim: 20,
            spread: 1.0,
            val_per_class: 100,
            test_per_class: 100,
        }
    }
}

impl DataSpec {
    /// Makes relative data file paths relative to `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match self {
            DataSpec::Blobs { .. } => {}
            DataSpec::Idx { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DataSpec::Csv { path, .. } => fix(path),
        }
    }
}

/// Label noise applied to the training and validation splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub ratio: f64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            ratio: 0.4,
            sampling: Sampling::Exact,
        }
    }
}

impl NoiseConfig {
    pub fn spec(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            kind: self.kind.clone(),
            ratio: self.ratio,
            seed,
            sampling: self.sampling,
        }
    }
}

/// Labels the early-stopping signal is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValidationMode {
    /// Validation labels carry their own independent noise draw.
    #[default]
    Noisy,
    /// The first `n` validation samples with their true labels.
    CleanSubset { n: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            init: 2,
            noise: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    /// Learning rate when any unsupervised loss term is enabled.
    pub lr: f64,
    /// Learning rate for purely supervised training.
    pub supervised_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let base = OptimizerConfig::default();
        Self {
            lr: base.lr,
            supervised_lr: 0.01,
            momentum: base.momentum,
            weight_decay: base.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSettings {
    pub total: usize,
    pub labeled: usize,
}

impl Default for BatchSettings {
    fn default() -> Self {
        Self {
            total: 64,
            labeled: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSettings {
    #[serde(flatten)]
    pub mode: FilterMode,
    /// Prediction-ensemble momentum.
    pub alpha: f64,
    pub max_filter_iterations: usize,
    pub warm_start: bool,
    pub reset_ensemble: bool,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            mode: FilterMode::default(),
            alpha: 0.6,
            max_filter_iterations: 10,
            warm_start: true,
            reset_ensemble: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSettings {
    pub decay: f64,
    /// Gaussian input perturbation, drawn separately for student and teacher.
    pub input_noise_std: f64,
}

impl Default for TeacherSettings {
    fn default() -> Self {
        Self {
            decay: 0.99,
            input_noise_std: 0.0,
        }
    }
}

/// A complete experiment description. Every field has a default, so a config
/// file only needs the keys it changes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seeds: Seeds,
    pub data: DataSpec,
    pub noise: NoiseConfig,
    pub validation: ValidationMode,
    pub model: ModelConfig,
    pub optimizer: OptimizerSettings,
    pub batch: BatchSettings,
    pub teacher: TeacherSettings,
    pub loss: LossConfig,
    pub early_stop: EarlyStopConfig,
    pub filter: FilterSettings,
    /// Per-iteration snapshots for resuming an interrupted run.
    pub checkpoint_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a TOML file and applies `key=value` overrides on dotted paths.
    /// Relative data paths are taken relative to the file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_with_overrides(&text, overrides)
            .map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
                other => other,
            })?;
        if let Some(dir) = path.parent() {
            cfg.data.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let mut merged = toml::Table::try_from(Self::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        merge_into(&mut merged, table);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSpec::Blobs {
                classes,
                per_class,
                dim,
                spread,
                val_per_class,
                test_per_class,
            } => {
                if *classes < 2 || *per_class == 0 || *dim == 0 {
                    return Err(Error::Config(
                        "data: blobs need classes >= 2, per_class >= 1, dim >= 1".into(),
                    ));
                }
                if !(*spread > 0.0) {
                    return Err(Error::Config(format!("data.spread must be > 0, got {spread}")));
                }
                if *val_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config(
                        "data: val_per_class and test_per_class must be >= 1".into(),
                    ));
                }
            }
            DataSpec::Idx {
                images,
                labels,
                val,
                test,
                ..
            } => {
                for (field, p) in [("data.images", images), ("data.labels", labels)] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("{field}: {} does not exist", p.display())));
                    }
                }
                if *val == 0 || *test == 0 {
                    return Err(Error::Config("data: val and test must be >= 1".into()));
                }
            }
            DataSpec::Csv { path, val, test, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("data.path: {} does not exist", path.display())));
                }
                if *val == 0 || *test == 0 {
                    return Err(Error::Config("data: val and test must be >= 1".into()));
                }
            }
        }
        if let ValidationMode::CleanSubset { n: 0 } = self.validation {
            return Err(Error::Config("validation.n must be >= 1".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(o.supervised_lr > 0.0) {
            return Err(Error::Config("optimizer learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(
                "optimizer.momentum must lie in [0, 1) and weight_decay >= 0".into(),
            ));
        }
        if self.batch.labeled > self.batch.total || self.batch.total == 0 {
            return Err(Error::Config(format!(
                "batch: labeled {} must not exceed total {}",
                self.batch.labeled, self.batch.total
            )));
        }
        if !(0.0..=1.0).contains(&self.teacher.decay) {
            return Err(Error::Config("teacher.decay must lie in [0, 1]".into()));
        }
        if !(self.teacher.input_noise_std >= 0.0) {
            return Err(Error::Config("teacher.input_noise_std must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.filter.alpha) {
            return Err(Error::Config("filter.alpha must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.ratio) {
            return Err(Error::Config("noise.ratio must lie in [0, 1]".into()));
        }
        self.loss.validate()?;
        self.early_stop.validate()
    }
}

/// Overlays `top` on `base`. Sections switching variant (`kind` or `mode`)
/// replace the base section instead of merging with it.
fn merge_into(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if same_variant(b, &t) => {
                merge_into(b, t)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn same_variant(base: &toml::Table, top: &toml::Table) -> bool {
    ["kind", "mode"]
        .iter()
        .all(|tag| match (base.get(*tag), top.get(*tag)) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        })
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
