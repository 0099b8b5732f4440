//! The experiment configuration file: one TOML document with a section per
//! subsystem, a global seed, and the output directory. Every command echoes
//! the fully resolved config it ran with into its output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::denoiser::DenoiserConfig;
use crate::edges::EdgeConfig;
use crate::error::{Error, Result};
use crate::sampling::SamplerConfig;
use crate::schedule::ScheduleConfig;
use crate::synth::SynthConfig;
use crate::training::{DistillConfig, TrainConfig};

/// Evaluation harness settings: degradation grids and the stability study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub jpeg_levels: Vec<f64>,
    pub blur_levels: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub stability_ensembles: Vec<usize>,
    pub stability_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            jpeg_levels: vec![95.0, 85.0, 75.0, 65.0, 55.0],
            blur_levels: vec![0.5, 1.0, 1.5, 2.0],
            noise_levels: vec![2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0],
            stability_ensembles: vec![1, 5],
            stability_runs: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub codec: CodecConfig,
    pub distill: DistillConfig,
    pub edges: EdgeConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let raw = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.as_ref().display()))
        })?;
        let cfg: ExperimentConfig =
            toml::from_str(&raw).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let schedule = self.schedule.build()?;
        self.sampler.validate(&schedule)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Echo the resolved config into `dir` under the given file name.
    pub fn echo_into(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), self.to_toml()?)?;
        Ok(())
    }
}
