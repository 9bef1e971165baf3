//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beam::DecodeConfig;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::ModelConfig;
use crate::training::{OptimizerConfig, TaskSchedule, TrainerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Task sampling for multi-task runs; single-task runs ignore it.
    #[serde(default)]
    pub schedule: Option<TaskSchedule>,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: u64,
    /// Save a checkpoint every this many steps (0 keeps only the final one).
    pub checkpoint_every: u64,
    pub bucket_width: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            steps: 1000,
            checkpoint_every: 0,
            bucket_width: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub asr: DecodeConfig,
    pub st: DecodeConfig,
    pub nmt: DecodeConfig,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            asr: DecodeConfig::asr(),
            st: DecodeConfig::st(),
            nmt: DecodeConfig::st(),
        }
    }
}

impl DecodeSection {
    pub fn for_task(&self, task: &str) -> &DecodeConfig {
        match task {
            "asr" => &self.asr,
            "nmt" => &self.nmt,
            _ => &self.st,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub feature_cache: Option<PathBuf>,
    /// Standardize features with statistics of the training split.
    pub normalize: bool,
    pub frontend: FrontendConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_manifest: None,
            eval_manifest: None,
            feature_cache: None,
            normalize: true,
            frontend: FrontendConfig::default(),
        }
    }
}

/// Values swept by `train`, one run per entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub decoder_depths: Vec<usize>,
    pub shared_layers: Vec<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Relative data paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train_manifest,
            &mut cfg.data.eval_manifest,
            &mut cfg.data.feature_cache,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if let Some(s) = &self.schedule {
            s.validate()?;
            for t in &s.tasks {
                if !self.model.tasks.contains(t) {
                    return Err(Error::Config(format!("schedule task {t:?} has no decoder in the model")));
                }
            }
        }
        for d in [&self.decode.asr, &self.decode.st, &self.decode.nmt] {
            d.validate()?;
        }
        self.data.frontend.validate()?;
        if self.training.bucket_width == 0 {
            return Err(Error::Config("bucket width must be at least 1".into()));
        }
        if self.sweep.decoder_depths.contains(&0) {
            return Err(Error::Config("swept decoder depths must be at least 1".into()));
        }
        if let Some(&s) = self.sweep.shared_layers.iter().find(|&&s| s > self.model.encoder_layers()) {
            return Err(Error::Config(format!(
                "swept shared layer count {s} exceeds the {} encoder layers",
                self.model.encoder_layers()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization; independent of formatting
    /// and key order in the source file.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Trainer settings for `task` (`multitask` uses the schedule).
    pub fn trainer_config(&self, task: &str) -> Result<TrainerConfig> {
        let schedule = if task == "multitask" {
            self.schedule
                .clone()
                .ok_or_else(|| Error::Config("multitask training needs a [schedule] section".into()))?
        } else {
            if !self.model.tasks.iter().any(|t| t == task) {
                return Err(Error::Config(format!(
                    "task {task:?} has no decoder (model tasks: {:?})",
                    self.model.tasks
                )));
            }
            TaskSchedule::single(task)
        };
        let cfg = TrainerConfig {
            optimizer: self.optimizer.clone(),
            schedule,
            bucket_width: self.training.bucket_width,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One configuration per sweep point, labelled; the config itself when
    /// nothing is swept.
    pub fn expand_sweep(&self) -> Vec<(String, ExperimentConfig)> {
        let depths: Vec<Option<usize>> = if self.sweep.decoder_depths.is_empty() {
            vec![None]
        } else {
            self.sweep.decoder_depths.iter().copied().map(Some).collect()
        };
        let shared: Vec<Option<usize>> = if self.sweep.shared_layers.is_empty() {
            vec![None]
        } else {
            self.sweep.shared_layers.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for d in &depths {
            for s in &shared {
                let mut c = self.clone();
                c.sweep = SweepSection::default();
                let mut label = Vec::new();
                if let Some(d) = d {
                    c.model.decoder.depth = *d;
                    label.push(format!("depth{d}"));
                }
                if let Some(s) = s {
                    c.model.shared_layers = Some(*s);
                    label.push(format!("shared{s}"));
                }
                out.push((label.join("-"), c));
            }
        }
        out
    }
}
