//! Run configuration: flat `key=value` files with `#` comments, plus
//! command-line overrides applied on top.

use std::fmt;
use std::path::{Path, PathBuf};

use ghvit::model::{ModelConfig, Variant};
use ghvit::train::AdamConfig;

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "GHVIT_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data";

/// Every accepted key, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "variant",
    "dataset",
    "data_dir",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_limit",
    "test_limit",
    "num_classes",
    "embed_dim",
    "layers",
    "heads",
    "epochs",
    "batch_size",
    "drop_last",
    "seed",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "out",
];

/// Datasets with a known on-disk layout under the data root.
pub const DATASETS: &[&str] = &["mnist", "fashion_mnist", "quickdraw"];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{location}: unknown config key `{key}` (valid keys: {})", KEYS.join(", "))]
    UnknownKey { key: String, location: String },
    #[error("{location}: invalid value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        location: String,
        reason: String,
    },
    #[error("{location}: expected `key=value`, got `{text}`")]
    Syntax { location: String, text: String },
    #[error("{location}: key `{key}` is set twice")]
    Duplicate { key: String, location: String },
}

/// Which split a path or limit belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Standard IDX file names for this split.
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub dataset: String,
    /// Dataset root; `None` falls back to `GHVIT_DATA_DIR`, then `data`.
    pub data_dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first `n` examples of a split.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub drop_last: bool,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Output directory; `None` means `runs/<variant>-<dataset>-seed<seed>`.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        RunConfig {
            variant: Variant::GcnHvit1,
            dataset: "mnist".into(),
            data_dir: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: None,
            test_limit: None,
            num_classes: 10,
            embed_dim: ModelConfig::DEFAULT_EMBED_DIM,
            layers: ModelConfig::DEFAULT_LAYERS,
            heads: ModelConfig::DEFAULT_HEADS,
            epochs: 30,
            batch_size: 128,
            drop_last: false,
            seed: 0,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            out: None,
        }
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_limit(n: Option<usize>) -> String {
    n.map(|n| n.to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (number, raw) in text.lines().enumerate() {
            let location = format!("{origin}:{}", number + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    location,
                    text: line.to_string(),
                });
            };
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    location,
                });
            }
            config.set(key, value.trim(), &location)?;
            seen.push(key.to_string());
        }
        Ok(config)
    }

    /// Applies one `key=value` assignment given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let location = format!("--set {assignment}");
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            location: location.clone(),
            text: assignment.to_string(),
        })?;
        self.set(key.trim(), value.trim(), &location)
    }

    pub fn set(&mut self, key: &str, value: &str, location: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            location: location.to_string(),
            reason: reason.to_string(),
        };
        let count = |positive: bool| -> Result<usize, ConfigError> {
            match value.parse::<usize>() {
                Ok(0) if positive => Err(bad("must be at least 1")),
                Ok(n) => Ok(n),
                Err(_) => Err(bad("expected a non-negative integer")),
            }
        };
        let limit = || -> Result<Option<usize>, ConfigError> {
            if value.is_empty() {
                Ok(None)
            } else {
                count(true).map(Some)
            }
        };
        let float = |ok: fn(f64) -> bool, range: &str| -> Result<f64, ConfigError> {
            match value.parse::<f64>() {
                Ok(x) if x.is_finite() && ok(x) => Ok(x),
                Ok(_) => Err(bad(&format!("must be {range}"))),
                Err(_) => Err(bad("expected a number")),
            }
        };
        match key {
            "variant" => self.variant = value.parse().map_err(|e: ghvit::Error| bad(&e.to_string()))?,
            "dataset" => {
                if !DATASETS.contains(&value) {
                    return Err(bad(&format!("expected one of {}", DATASETS.join(", "))));
                }
                self.dataset = value.to_string();
            }
            "data_dir" => self.data_dir = optional_path(value),
            "train_images" => self.train_images = optional_path(value),
            "train_labels" => self.train_labels = optional_path(value),
            "test_images" => self.test_images = optional_path(value),
            "test_labels" => self.test_labels = optional_path(value),
            "train_limit" => self.train_limit = limit()?,
            "test_limit" => self.test_limit = limit()?,
            "num_classes" => self.num_classes = count(true)?,
            "embed_dim" => self.embed_dim = count(true)?,
            "layers" => self.layers = count(true)?,
            "heads" => self.heads = count(true)?,
            "epochs" => self.epochs = count(false)?,
            "batch_size" => self.batch_size = count(true)?,
            "drop_last" => {
                self.drop_last = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad("expected true or false")),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("expected an unsigned 64-bit integer"))?,
            "lr" => self.lr = float(|x| x > 0.0, "positive")?,
            "beta1" => self.beta1 = float(|x| (0.0..1.0).contains(&x), "in [0, 1)")?,
            "beta2" => self.beta2 = float(|x| (0.0..1.0).contains(&x), "in [0, 1)")?,
            "adam_eps" => self.adam_eps = float(|x| x > 0.0, "positive")?,
            "out" => self.out = optional_path(value),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    location: location.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|&key| {
                let value = match key {
                    "variant" => self.variant.name().to_string(),
                    "dataset" => self.dataset.clone(),
                    "data_dir" => show_path(&self.data_dir),
                    "train_images" => show_path(&self.train_images),
                    "train_labels" => show_path(&self.train_labels),
                    "test_images" => show_path(&self.test_images),
                    "test_labels" => show_path(&self.test_labels),
                    "train_limit" => show_limit(self.train_limit),
                    "test_limit" => show_limit(self.test_limit),
                    "num_classes" => self.num_classes.to_string(),
                    "embed_dim" => self.embed_dim.to_string(),
                    "layers" => self.layers.to_string(),
                    "heads" => self.heads.to_string(),
                    "epochs" => self.epochs.to_string(),
                    "batch_size" => self.batch_size.to_string(),
                    "drop_last" => self.drop_last.to_string(),
                    "seed" => self.seed.to_string(),
                    "lr" => self.lr.to_string(),
                    "beta1" => self.beta1.to_string(),
                    "beta2" => self.beta2.to_string(),
                    "adam_eps" => self.adam_eps.to_string(),
                    "out" => show_path(&self.out),
                    _ => unreachable!("every key is listed"),
                };
                (key, value)
            })
            .collect()
    }

    /// Fills every defaulted path from the data root and the split file
    /// names. `env_data_dir` is the value of [`DATA_DIR_ENV`], if set.
    pub fn resolve_paths(&mut self, env_data_dir: Option<&str>) {
        let root = self
            .data_dir
            .clone()
            .or_else(|| env_data_dir.filter(|s| !s.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let dir = root.join(&self.dataset);
        let (train_i, train_l) = Split::Train.file_names();
        let (test_i, test_l) = Split::Test.file_names();
        self.train_images.get_or_insert_with(|| dir.join(train_i));
        self.train_labels.get_or_insert_with(|| dir.join(train_l));
        self.test_images.get_or_insert_with(|| dir.join(test_i));
        self.test_labels.get_or_insert_with(|| dir.join(test_l));
        self.data_dir = Some(root);
        let out = format!("{}-{}-seed{}", self.variant.name(), self.dataset, self.seed);
        self.out.get_or_insert_with(|| Path::new("runs").join(out));
    }

    /// `(images, labels)` for a split; `None` before [`resolve_paths`](Self::resolve_paths).
    pub fn split_paths(&self, split: Split) -> Option<(&Path, &Path)> {
        let (i, l) = match split {
            Split::Train => (&self.train_images, &self.train_labels),
            Split::Test => (&self.test_images, &self.test_labels),
        };
        Some((i.as_deref()?, l.as_deref()?))
    }

    pub fn limit(&self, split: Split) -> Option<usize> {
        match split {
            Split::Train => self.train_limit,
            Split::Test => self.test_limit,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (key, value) in self.entries() {
            writeln!(f, "{key}={value}")?;
        }
        Ok(())
    }
}
