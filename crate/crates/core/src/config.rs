//! Run configuration for the command-line tool, stored as TOML. Every
//! section defaults to the library defaults and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loopsim::{HowlDetectorConfig, LoopConfig};
use crate::metrics::EvalSetup;
use crate::neural_kalman::{HybridConfig, NetSizes};
use crate::scene::{SamplerConfig, Split};
use crate::signal::StftConfig;
use crate::trainer::{TrainConfig, TrainSetup};
use crate::wav::WavFormat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub gains: Vec<f64>,
    /// Number of scenes drawn from `split`.
    pub scenes: usize,
    pub split: Split,
    /// Seed of the scene draw, independent of the sampler seed.
    pub draw_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { gains: vec![1.5, 2.0, 2.5, 3.0], scenes: 20, split: Split::Test, draw_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub gains: Vec<f64>,
    pub scenes: usize,
    pub split: Split,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { gains: vec![1.5, 2.0], scenes: 4, split: Split::Test }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub wav_format: WavFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { wav_format: WavFormat::Float32 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds the scene sampler and network initialization.
    pub seed: u64,
    pub stft: StftConfig,
    /// Filter, reference and covariance sources of the learned variant.
    pub filter: HybridConfig,
    pub nets: NetSizes,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub detector: HowlDetectorConfig,
    pub trainer: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub simulate: SimulateConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.filter.fdkf.validate()?;
        self.detector.validate()?;
        self.trainer.validate()?;
        self.sampler.validate()?;
        if self.stft.num_bins() != self.filter.fdkf.num_bins {
            return Err(Error::config(format!(
                "filter.fdkf.num_bins is {} but the transform yields {} bins",
                self.filter.fdkf.num_bins,
                self.stft.num_bins()
            )));
        }
        if !(self.loop_cfg.saturation > 0.0) {
            return Err(Error::config("loop.saturation must be positive"));
        }
        if self.nets.mask_hidden == 0 || self.nets.mask_layers == 0 || self.nets.cov_hidden == 0 {
            return Err(Error::config("network sizes must be positive"));
        }
        if self.eval.gains.iter().chain(&self.simulate.gains).any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::config("gains must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup { hybrid: self.filter, stft: self.stft, loop_cfg: self.loop_cfg, detector: self.detector }
    }

    pub fn eval_setup(&self, duration: f64) -> EvalSetup {
        EvalSetup { stft: self.stft, loop_cfg: self.loop_cfg, detector: self.detector, duration }
    }
}
