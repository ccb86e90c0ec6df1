//! Training configuration shared by both stages.

use serde::{Deserialize, Serialize};

use crate::deviation::StageOneConfig;
use crate::diffusion::{DenoiserConfig, MotionLossWeights, ScheduleKind};
use crate::error::{Error, Result};
use crate::losses::{GanKind, LossWeights};
use crate::media_io::audio::AudioFeatureConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Options {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub gan: GanKind,
    /// Side length hand/face crops are resized to.
    pub crop: usize,
    pub disc_width: usize,
    /// Seed of the frozen perceptual nets.
    pub perceptual_seed: u64,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 2e-4,
            weights: LossWeights::default(),
            gan: GanKind::LeastSquares,
            crop: 32,
            disc_width: 16,
            perceptual_seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Options {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training noise levels `T`.
    pub diffusion_steps: usize,
    /// Denoising iterations at sampling time.
    pub sample_steps: usize,
    pub schedule: ScheduleKind,
    /// Window length `M`.
    pub window: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub loss: MotionLossWeights,
    /// Probability of replacing the teacher `prev4` with the model's own
    /// estimate of the preceding window.
    pub self_condition_prob: f64,
    /// Train on the first eligible window of the first clip only.
    pub single_window: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-4,
            diffusion_steps: 1000,
            sample_steps: 50,
            schedule: ScheduleKind::Cosine,
            window: 8,
            width: 128,
            blocks: 4,
            heads: 4,
            mlp_ratio: 2,
            loss: MotionLossWeights::default(),
            self_condition_prob: 0.0,
            single_window: false,
        }
    }
}

impl Stage2Options {
    pub fn denoiser(&self, k: usize, audio_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            k,
            audio_dim,
            window: self.window,
            width: self.width,
            blocks: self.blocks,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: StageOneConfig,
    pub audio: AudioFeatureConfig,
    pub stage1: Stage1Options,
    pub stage2: Stage2Options,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: StageOneConfig::default(),
            audio: AudioFeatureConfig::default(),
            stage1: Stage1Options::default(),
            stage2: Stage2Options::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.weights.validate()?;
        let s1 = &self.stage1;
        if s1.batch == 0 || s1.crop < 4 || s1.disc_width == 0 || !(s1.lr > 0.0) {
            return Err(Error::Config("stage1 batch, crop, disc_width and lr must be positive".into()));
        }
        let s2 = &self.stage2;
        if s2.batch == 0 || !(s2.lr > 0.0) || s2.sample_steps == 0 {
            return Err(Error::Config("stage2 batch, lr and sample_steps must be positive".into()));
        }
        if s2.window < 3 {
            return Err(Error::Config("stage2 window must be at least 3 frames".into()));
        }
        if !(0.0..=1.0).contains(&s2.self_condition_prob) {
            return Err(Error::Config("self_condition_prob must lie in [0, 1]".into()));
        }
        s2.denoiser(self.model.k, self.audio.bands).validate()?;
        if self.audio.bands == 0 || !(self.audio.hop_seconds > 0.0) {
            return Err(Error::Config("audio bands and hop must be positive".into()));
        }
        Ok(())
    }
}
