//! Experiment configuration: TOML with section prefixes, e.g.
//! `fed.active_per_round = 20`, plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PartitionMode;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::nn::ARCHITECTURES;
use crate::trainer::TrainerConfig;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "PRISM_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Idx,
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub separation: f64,
    pub max_shift: usize,
    pub noise: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            classes: 10,
            train_samples: 2000,
            test_samples: 500,
            channels: 1,
            height: 12,
            width: 12,
            separation: 3.0,
            max_shift: 1,
            noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub cifar_train: Vec<PathBuf>,
    pub cifar_test: Vec<PathBuf>,
    /// Per-channel standardization with training-split statistics.
    pub standardize: bool,
    pub synthetic: SyntheticSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Synthetic,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            cifar_train: Vec::new(),
            cifar_test: Vec::new(),
            standardize: false,
            synthetic: SyntheticSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub mode: PartitionMode,
    pub alpha: f64,
    /// 0 splits the training set evenly across clients.
    pub samples_per_client: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            mode: PartitionMode::Iid,
            alpha: 1.0,
            samples_per_client: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// One of [`ARCHITECTURES`].
    pub model: String,
    /// Batch norm after the convolutions of the small CNNs.
    pub batchnorm: bool,
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub partition: PartitionSection,
    pub fed: FederationConfig,
    pub train: TrainerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "synthetic".into(),
            batchnorm: false,
            output_dir: None,
            data: DataSection::default(),
            partition: PartitionSection::default(),
            fed: FederationConfig::default(),
            train: TrainerConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `key=value`; values that are not TOML literals are taken as
/// strings, so `fed.method=prism` works unquoted.
fn override_table(item: &str) -> Result<toml::Table> {
    let (key, value) = item
        .split_once('=')
        .ok_or_else(|| Error::config(item, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty()
        || !key
            .split('.')
            .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
    {
        return Err(Error::config(key, "invalid key"));
    }
    let value = value.trim();
    format!("{key} = {value}")
        .parse::<toml::Table>()
        .or_else(|_| format!("{key} = {}", toml::Value::String(value.to_string())).parse::<toml::Table>())
        .map_err(|e| Error::config(key, e.to_string()))
}

fn field_of(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".to_string())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(field_of(e.message()), e.message().to_string()))?;
        for o in overrides {
            merge(&mut table, override_table(o)?);
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(field_of(e.message()), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => (
                fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                p.parent().map(Path::to_path_buf),
            ),
            None => (String::new(), None),
        };
        let mut cfg = Self::parse(&text, overrides)?;
        if let Some(base) = base {
            cfg.resolve_paths(&base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.train_images,
            &mut d.train_labels,
            &mut d.test_images,
            &mut d.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        d.cifar_train.iter_mut().chain(d.cifar_test.iter_mut()).for_each(fix);
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ARCHITECTURES.contains(&self.model.as_str()) {
            return Err(Error::config(
                "model",
                format!(
                    "unknown architecture `{}`, expected one of {}",
                    self.model,
                    ARCHITECTURES.join(", ")
                ),
            ));
        }
        self.fed.validate()?;
        let mut train = self.train;
        train.total_rounds = self.fed.rounds;
        train.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("train.{field}"), message),
            e => e,
        })?;
        if self.partition.mode == PartitionMode::Dirichlet
            && !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite())
        {
            return Err(Error::config("partition.alpha", "must be a positive number"));
        }
        match self.data.kind {
            DataKind::Synthetic => {
                let s = &self.data.synthetic;
                if s.classes < 2 || s.train_samples == 0 || s.test_samples < 8 {
                    return Err(Error::config(
                        "data.synthetic",
                        "needs at least 2 classes, 1 training sample and 8 test samples",
                    ));
                }
                if s.channels == 0 || s.height < 4 || s.width < 4 {
                    return Err(Error::config("data.synthetic", "images must be at least 1x4x4"));
                }
                if !(s.separation >= 0.0 && s.noise >= 0.0) {
                    return Err(Error::config(
                        "data.synthetic",
                        "separation and noise must be non-negative",
                    ));
                }
            }
            DataKind::Idx => {
                for (name, p) in [
                    ("data.train_images", &self.data.train_images),
                    ("data.train_labels", &self.data.train_labels),
                    ("data.test_images", &self.data.test_images),
                    ("data.test_labels", &self.data.test_labels),
                ] {
                    if p.is_none() {
                        return Err(Error::config(name, "required for IDX data"));
                    }
                }
            }
            DataKind::Cifar => {
                if self.data.cifar_train.is_empty() || self.data.cifar_test.is_empty() {
                    return Err(Error::config(
                        "data.cifar_train",
                        "CIFAR data needs train and test batch files",
                    ));
                }
            }
        }
        Ok(())
    }

    /// `output_dir`, else `$PRISM_OUTPUT_DIR`, else `./prism-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("prism-out"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
