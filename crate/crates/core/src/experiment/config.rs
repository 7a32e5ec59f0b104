//! Experiment configuration (one JSON document).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::overlay::cache::DEFAULT_MEMORY_CAPACITY;
use crate::overlay::controller::DEFAULT_MAX_INTERVAL;
use crate::simnet::{ComputeSpec, LinkSpec, Regime};
use crate::svcca::SvccaConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    /// `DSET` files; relative paths resolve against the config file.
    File { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of the device model; its last layer maps to the classes.
    pub hidden: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevicesConfig {
    pub count: usize,
    pub per_round: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayConfig {
    /// Share of the device population whose activations reach this overlay.
    pub coverage: f64,
    /// Hidden widths of the overlay; it ends in a layer to the classes.
    #[serde(default = "default_overlay_hidden")]
    pub hidden: Vec<usize>,
    /// Overlay SGD steps per round, each on `sample_size` cached batches.
    #[serde(default = "default_afl_steps")]
    pub afl_steps: usize,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    /// Overlay learning rate; the FL rate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f32>,
}

fn default_overlay_hidden() -> Vec<usize> {
    vec![64]
}

fn default_afl_steps() -> usize {
    4
}

fn default_sample_size() -> usize {
    8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub enabled: bool,
    pub max_interval: u32,
    pub variance_fraction: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            enabled: true,
            max_interval: DEFAULT_MAX_INTERVAL,
            variance_fraction: SvccaConfig::default().variance_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub memory_capacity: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            memory_capacity: DEFAULT_MEMORY_CAPACITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    pub rounds: u32,
    #[serde(default = "default_devices")]
    pub devices: DevicesConfig,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionConfig,
    /// SFL cut in the large model.
    pub split_index: usize,
    /// Device-model layer whose output feeds the overlays.
    pub tap_layer: usize,
    #[serde(default = "default_overlays")]
    pub overlays: Vec<OverlayConfig>,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub network: LinkSpec,
    #[serde(default)]
    pub compute: ComputeSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_regimes() -> Vec<Regime> {
    Regime::ALL.to_vec()
}

fn default_devices() -> DevicesConfig {
    DevicesConfig {
        count: 100,
        per_round: 20,
    }
}

fn default_lr() -> f32 {
    0.01
}

fn default_batch_size() -> usize {
    16
}

fn default_partition() -> PartitionConfig {
    PartitionConfig { alpha: 0.5 }
}

fn default_overlays() -> Vec<OverlayConfig> {
    [0.4, 0.6]
        .into_iter()
        .map(|coverage| OverlayConfig {
            coverage,
            hidden: default_overlay_hidden(),
            afl_steps: default_afl_steps(),
            sample_size: default_sample_size(),
            lr: None,
        })
        .collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("edgefl-out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config("json", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates `path`, resolving dataset paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let DatasetConfig::File { train, test } = &mut cfg.dataset {
            let dir = path.parent().unwrap_or(Path::new("."));
            *train = dir.join(&*train);
            *test = dir.join(&*test);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Device model layer count.
    pub fn small_layers(&self) -> usize {
        self.model.hidden.len() + 1
    }

    /// Large model layer count: the first `tap_layer` device layers plus the
    /// first overlay's layers.
    pub fn large_layers(&self) -> usize {
        self.tap_layer + self.overlays.first().map_or(1, |o| o.hidden.len() + 1)
    }

    pub fn svcca(&self) -> SvccaConfig {
        SvccaConfig {
            variance_fraction: self.controller.variance_fraction,
            ..SvccaConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if self.regimes.is_empty() {
            return Err(Error::config("regimes", "list at least one regime"));
        }
        let unique: BTreeSet<_> = self.regimes.iter().collect();
        if unique.len() != self.regimes.len() {
            return Err(Error::config("regimes", "regimes repeat"));
        }
        if self.devices.count == 0 {
            return Err(Error::config("devices.count", "must be >= 1"));
        }
        if self.devices.per_round == 0 || self.devices.per_round > self.devices.count {
            return Err(Error::config(
                "devices.per_round",
                format!("{} not in 1..={}", self.devices.per_round, self.devices.count),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} must be > 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return Err(Error::config(
                "partition.alpha",
                format!("{} must be > 0", self.partition.alpha),
            ));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "need one or more non-zero widths"));
        }
        if self.tap_layer == 0 || self.tap_layer >= self.small_layers() {
            return Err(Error::config(
                "tap_layer",
                format!("{} not in 1..{}", self.tap_layer, self.small_layers()),
            ));
        }
        if self.split_index == 0 || self.split_index >= self.large_layers() {
            return Err(Error::config(
                "split_index",
                format!("{} not in 1..{}", self.split_index, self.large_layers()),
            ));
        }
        let needs_overlays = self.regimes.iter().any(|r| {
            matches!(r, Regime::Emo | Regime::FlLarge | Regime::SflCloud | Regime::SflEdge)
        });
        if needs_overlays && self.overlays.is_empty() {
            return Err(Error::config("overlays", "list at least one overlay"));
        }
        for (i, o) in self.overlays.iter().enumerate() {
            if !(o.coverage > 0.0 && o.coverage <= 1.0) {
                return Err(Error::config(
                    format!("overlays[{i}].coverage"),
                    format!("{} not in (0, 1]", o.coverage),
                ));
            }
            if o.hidden.contains(&0) {
                return Err(Error::config(format!("overlays[{i}].hidden"), "widths must be > 0"));
            }
            if o.sample_size == 0 {
                return Err(Error::config(format!("overlays[{i}].sample_size"), "must be >= 1"));
            }
            if let Some(lr) = o.lr {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return Err(Error::config(format!("overlays[{i}].lr"), format!("{lr}")));
                }
            }
        }
        if self.controller.max_interval == 0 {
            return Err(Error::config("controller.max_interval", "must be >= 1"));
        }
        self.svcca()
            .validate()
            .map_err(|_| Error::config("controller.variance_fraction", "not in (0, 1]"))?;
        if self.cache.memory_capacity == 0 {
            return Err(Error::config("cache.memory_capacity", "must be >= 1"));
        }
        self.network.validate()?;
        self.compute.validate()?;
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        Ok(())
    }

    /// Training and test sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.dataset {
            DatasetConfig::Synthetic(s) => s.generate(self.seed)?,
            DatasetConfig::File { train, test } => (Dataset::load(train)?, Dataset::load(test)?),
        };
        if test.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        if train.feature_dim() != test.feature_dim() || train.num_classes() != test.num_classes() {
            return Err(Error::config(
                "dataset",
                format!(
                    "train has {} features / {} classes, test has {} / {}",
                    train.feature_dim(),
                    train.num_classes(),
                    test.feature_dim(),
                    test.num_classes()
                ),
            ));
        }
        Ok((train, test))
    }
}
