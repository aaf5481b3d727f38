//! Run configuration (TOML). Unknown keys are rejected; [`RunConfig::resolve`]
//! expands presets so the snapshot written to a run directory is complete.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_archive, FieldSchema};
use crate::error::{Error, Result};
use crate::metrics::ROLLOUT_STEPS;
use crate::model::ModelConfig;
use crate::ops::ScalePair;
use crate::processor::ProcessorConfig;
use crate::tokeniser::TokeniserConfig;
use crate::training::TrainConfig;

/// Environment variable that switches a run into deterministic-kernel mode.
pub const DETERMINISTIC_ENV: &str = "FLEXITOK_DETERMINISTIC";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// CPU tests and trend runs.
    #[default]
    Tiny,
    /// Reference tokeniser widths with one residual block, small processor.
    Desk,
    Reference,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Preset,
    /// Explicit layouts override the preset.
    pub tokeniser: Option<TokeniserConfig>,
    pub processor: Option<ProcessorConfig>,
}

impl ModelSection {
    pub fn preset_config(preset: Preset, c_total: usize) -> ModelConfig {
        match preset {
            Preset::Tiny => {
                let t = TokeniserConfig::tiny(c_total);
                ModelConfig { processor: ProcessorConfig::tiny(t.latent_channels), tokeniser: t }
            }
            Preset::Desk => ModelConfig {
                tokeniser: TokeniserConfig { res_blocks: 1, ..TokeniserConfig::reference(c_total) },
                processor: ProcessorConfig::desk(),
            },
            Preset::Reference => {
                ModelConfig { tokeniser: TokeniserConfig::reference(c_total), processor: ProcessorConfig::reference() }
            }
        }
    }
}

fn one_i64() -> i64 {
    1
}

/// One dataset of the training mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Periodic advection at a random integer velocity per trajectory.
    Advection {
        name: String,
        grid: (usize, usize),
        frames: usize,
        trajectories: usize,
        val_trajectories: usize,
        #[serde(default = "one_i64")]
        max_speed: i64,
        #[serde(default)]
        seed: u64,
    },
    /// Independent Gaussian random field frames.
    Gaussian {
        name: String,
        grid: (usize, usize),
        frames: usize,
        trajectories: usize,
        val_trajectories: usize,
        beta: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Trajectories stored in the archive format.
    Archive { name: String, path: PathBuf, val_path: PathBuf },
}

impl DataSource {
    pub fn name(&self) -> &str {
        match self {
            Self::Advection { name, .. } | Self::Gaussian { name, .. } | Self::Archive { name, .. } => name,
        }
    }

    pub fn schema(&self) -> Result<FieldSchema> {
        match self {
            Self::Advection { .. } => Ok(FieldSchema::advection()),
            Self::Gaussian { .. } => Ok(FieldSchema::scalar("field")),
            Self::Archive { path, .. } => Ok(read_archive(path, None)?.schema.clone()),
        }
    }
}

fn ten() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sources: Vec<DataSource>,
    /// Start offset between consecutive 10-frame windows.
    #[serde(default = "ten")]
    pub stride: usize,
}

fn rollout_steps() -> usize {
    ROLLOUT_STEPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "rollout_steps")]
    pub rollout_steps: usize,
    /// Compression for evaluation; defaults to the validation scales.
    #[serde(default)]
    pub compression: Option<Vec<ScalePair>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { rollout_steps: ROLLOUT_STEPS, compression: None }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataConfig,
    #[serde(default = "TrainConfig::desk_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default = "TrainConfig::desk_rollout")]
    pub rollout: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Fields of all sources, each name once in order of first appearance.
    pub fn union_schema(&self) -> Result<FieldSchema> {
        let mut fields = Vec::new();
        for src in &self.data.sources {
            for f in src.schema()?.fields {
                match fields.iter().find(|g: &&crate::data::FieldSpec| g.name == f.name) {
                    None => fields.push(f),
                    Some(g) if g.rank == f.rank => {}
                    Some(g) => {
                        return Err(Error::SchemaMismatch {
                            field: f.name.clone(),
                            detail: format!("source `{}` declares {:?}, an earlier source {:?}", src.name(), f.rank, g.rank),
                        })
                    }
                }
            }
        }
        FieldSchema::new(fields).map_err(config_err)
    }

    /// Expands the model preset against the data's field count and checks
    /// every section.
    pub fn resolve(mut self) -> Result<Self> {
        if self.data.sources.is_empty() {
            return Err(config_err("data.sources is empty"));
        }
        let mut names: Vec<&str> = self.data.sources.iter().map(|s| s.name()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("data source names must be unique"));
        }
        let c_total = self.union_schema()?.total_channels();
        let preset = ModelSection::preset_config(self.model.preset, c_total);
        let tok = self.model.tokeniser.take().unwrap_or(preset.tokeniser);
        let proc = self.model.processor.take().unwrap_or(ProcessorConfig { latent_dim: tok.latent_channels, ..preset.processor });
        let model = ModelConfig { tokeniser: tok, processor: proc };
        model.validate().map_err(config_err)?;
        if model.tokeniser.c_total < c_total {
            return Err(config_err(format!("tokeniser c_total {} is below the {c_total} data channels", model.tokeniser.c_total)));
        }
        self.model.tokeniser = Some(model.tokeniser);
        self.model.processor = Some(model.processor);
        self.pretrain.validate().map_err(config_err)?;
        self.rollout.validate().map_err(config_err)?;
        if self.data.stride == 0 {
            return Err(config_err("data.stride must be positive"));
        }
        Ok(self)
    }

    /// Model layout of a resolved config.
    pub fn model_config(&self) -> Result<ModelConfig> {
        match (&self.model.tokeniser, &self.model.processor) {
            (Some(t), Some(p)) => Ok(ModelConfig { tokeniser: t.clone(), processor: p.clone() }),
            _ => Err(config_err("model section is not resolved")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [[data.sources]]
        kind = "advection"
        name = "adv"
        grid = [32, 32]
        frames = 30
        trajectories = 4
        val_trajectories = 2
    "#;

    #[test]
    fn minimal_config_resolves_and_round_trips() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap().resolve().unwrap();
        assert_eq!(cfg.model_config().unwrap().tokeniser.c_total, 3);
        let again = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.clone().resolve().unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["bogus = 1\n", "[eval]\nwat = 2\n"] {
            let err = RunConfig::from_toml_str(&format!("{extra}{MINIMAL}")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
        let bad_source = MINIMAL.replace("frames = 30", "frames = 30\n        colour = 1");
        assert!(RunConfig::from_toml_str(&bad_source).is_err());
    }

    #[test]
    fn sample_config_resolves() {
        let cfg = RunConfig::from_toml_str(include_str!("../../../configs/advection.toml")).unwrap().resolve().unwrap();
        assert_eq!(cfg.model_config().unwrap().tokeniser.c_total, 4);
        assert_eq!(cfg.rollout.epoch_of(499), 9);
    }

    #[test]
    fn union_merges_shared_fields() {
        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.data.sources.push(DataSource::Gaussian {
            name: "grf".into(),
            grid: (32, 32),
            frames: 10,
            trajectories: 2,
            val_trajectories: 1,
            beta: 2.0,
            seed: 0,
        });
        assert_eq!(cfg.union_schema().unwrap().total_channels(), 4);
    }
}
