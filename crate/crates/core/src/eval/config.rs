use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CorpusSpec;
use crate::engine::{AugmentConfig, ModeConfig, ScheduleConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::ClConfig;
use crate::multires::MultiresConfig;
use crate::network::NetConfig;

/// Synthetic corpus to generate, or a directory written by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub num_source: usize,
    pub num_target: usize,
    pub num_target_val: usize,
    /// Read the corpus from here instead of generating it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = CorpusSpec::desk_default(0);
        DataConfig {
            seed: 0,
            num_source: spec.num_source,
            num_target: spec.num_target,
            num_target_val: spec.num_target_val,
            dir: None,
        }
    }
}

impl DataConfig {
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            num_source: self.num_source,
            num_target: self.num_target,
            num_target_val: self.num_target_val,
            ..CorpusSpec::desk_default(self.seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: [usize; 4],
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let n = NetConfig::desk_default(2);
        ModelConfig { widths: n.widths, embed_dim: n.embed_dim }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed: parameter init and every per-step random draw.
    pub seed: u64,
    pub cl_grid: [usize; 2],
    pub rcs_temperature: f64,
    /// Evaluate on the held-out target split every this many iterations (0: only at the end).
    pub eval_interval: u64,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: u64,
    pub output_dir: PathBuf,
    /// Continue from this checkpoint directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::desk_default(2);
        RunConfig {
            seed: t.seed,
            cl_grid: t.cl_grid,
            rcs_temperature: t.rcs_temperature,
            eval_interval: 500,
            checkpoint_interval: 0,
            output_dir: PathBuf::from("runs/default"),
            resume: None,
        }
    }
}

/// The whole run description, one TOML section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub cl: ClConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub mode: ModeConfig,
    pub multires: MultiresConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model and optimizer settings for a corpus with `num_classes` classes.
    pub fn train_config(&self, num_classes: usize) -> TrainConfig {
        TrainConfig {
            seed: self.run.seed,
            net: NetConfig { widths: self.model.widths, embed_dim: self.model.embed_dim, num_classes },
            cl: self.cl.clone(),
            schedule: self.schedule.clone(),
            augment: self.augment.clone(),
            mode: self.mode.clone(),
            multires: self.multires.clone(),
            cl_grid: self.run.cl_grid,
            rcs_temperature: self.run.rcs_temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.seed > i64::MAX as u64 {
            return Err(Error::Config("data.seed must fit in a signed 64-bit integer".into()));
        }
        if self.data.dir.is_none()
            && (self.data.num_source == 0 || self.data.num_target == 0 || self.data.num_target_val == 0)
        {
            return Err(Error::Config("data: every split needs at least one image".into()));
        }
        // The class count is only known once the corpus is loaded; 2 is enough to check the rest.
        self.train_config(2).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = ExperimentConfig::parse("[cl]\ntemperature = 0.2\n").unwrap_err();
        assert!(e.to_string().contains("temperature"), "{e}");
        assert!(ExperimentConfig::parse("[nonsense]\n").is_err());
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let c = ExperimentConfig::parse("[mode]\ncl_weighted = false\nmultires = \"lr-only\"\n").unwrap();
        assert!(!c.mode.cl_weighted && c.mode.cl_on);
        assert_eq!(c.mode.multires, crate::engine::MultiresMode::LrOnly);
        assert_eq!(c.cl, ClConfig::default());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::parse("[cl]\ntau = 0.0\n").is_err());
        assert!(ExperimentConfig::parse("[schedule]\nwarmup_iters = 5\ntotal_iters = 4\n").is_err());
    }
}
