//! Run configuration: one strict JSON document covering every stage, plus
//! the digest that stamps each artifact so mismatched pipelines are caught
//! at load time rather than in the metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Noise levels whose features are stacked into the pyramid.
    pub timesteps: Vec<usize>,
    /// Raw channel widths the backbone emits, finest scale first.
    pub widths: Vec<usize>,
    /// Channel widths after per-scale projection, finest scale first.
    pub harmonized_widths: Vec<usize>,
    pub schedule: ScheduleConfig,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            timesteps: encoder::DEFAULT_TIMESTEPS.to_vec(),
            widths: encoder::DEFAULT_WIDTHS.to_vec(),
            harmonized_widths: vec![32, 32, 64, 64, 128],
            schedule: ScheduleConfig::default(),
            pretrain_steps: 500,
            pretrain_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub num_features: usize,
    pub length_scale: f64,
    pub seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            num_features: 256,
            length_scale: 1.0,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub r: usize,
    pub delta: f64,
    pub sigma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub aux_weight: f64,
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub refine_width: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            r: 11,
            delta: 1.0,
            sigma: 1.0,
            tau: 0.1,
            alpha: 0.25,
            aux_weight: 0.1,
            blocks: 4,
            width: 256,
            heads: 8,
            refine_width: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdConfig {
    pub se_ratio: usize,
    /// Decoder stage widths, coarsest scale first.
    pub decoder_widths: Vec<usize>,
    pub threshold: f64,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig {
            se_ratio: crate::cdhead::DEFAULT_SE_RATIO,
            decoder_widths: crate::cdhead::DEFAULT_DECODER_WIDTHS.to_vec(),
            threshold: crate::cdhead::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Iterations before the change loss turns on.
    pub warmup: u64,
    /// Iterations over which its weight ramps to `lambda_max`.
    pub ramp: u64,
    pub lambda_max: f64,
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Micro-batches accumulated per optimizer update.
    pub accumulation: usize,
    pub epochs: usize,
    /// Validation snapshot cadence in iterations.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup: 500,
            ramp: 1000,
            lambda_max: 1.0,
            lr: 1e-4,
            lr_floor: 1e-6,
            weight_decay: 1e-4,
            batch: 2,
            accumulation: 8,
            epochs: 30,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: String,
    pub train_split: String,
    pub val_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: "data/toy".to_string(),
            train_split: "train".to_string(),
            val_split: "test".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
    /// Seed for the per-sample feature-extraction noise, fixed so repeated
    /// evaluations of one checkpoint agree bit for bit.
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".to_string(),
            noise_seed: 1234,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub matcher: MatcherConfig,
    pub flow: FlowConfig,
    pub cd: CdConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let scales = encoder::NUM_SCALES;
        if self.encoder.widths.len() != scales {
            return Err(Error::validation(format!(
                "encoder.widths must list {scales} scales, got {}",
                self.encoder.widths.len()
            )));
        }
        if self.encoder.harmonized_widths.len() != scales {
            return Err(Error::validation(format!(
                "encoder.harmonized_widths must list {scales} scales, got {}",
                self.encoder.harmonized_widths.len()
            )));
        }
        if self.cd.decoder_widths.len() != scales {
            return Err(Error::validation(format!(
                "cd.decoder_widths must list {scales} scales, got {}",
                self.cd.decoder_widths.len()
            )));
        }
        if self.encoder.timesteps.is_empty() {
            return Err(Error::validation("encoder.timesteps must be non-empty"));
        }
        if self.encoder.timesteps.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::validation(
                "encoder.timesteps must be strictly increasing",
            ));
        }
        if let Some(&t) = self.encoder.timesteps.last() {
            if t >= self.encoder.schedule.steps {
                return Err(Error::validation(format!(
                    "timestep {t} exceeds the {}-step schedule",
                    self.encoder.schedule.steps
                )));
            }
        }
        if !(self.cd.threshold > 0.0 && self.cd.threshold < 1.0) {
            return Err(Error::validation(format!(
                "cd.threshold must lie strictly inside (0,1), got {}",
                self.cd.threshold
            )));
        }
        if self.train.ramp == 0 {
            return Err(Error::validation("train.ramp must be at least 1"));
        }
        if !(self.train.lambda_max > 0.0) {
            return Err(Error::validation(format!(
                "train.lambda_max must be positive, got {}",
                self.train.lambda_max
            )));
        }
        if self.train.batch == 0 || self.train.accumulation == 0 {
            return Err(Error::validation(
                "train.batch and train.accumulation must be at least 1",
            ));
        }
        if self.train.epochs > 100 {
            return Err(Error::validation(format!(
                "train.epochs is capped at 100, got {}",
                self.train.epochs
            )));
        }
        if self.train.eval_every == 0 {
            return Err(Error::validation("train.eval_every must be at least 1"));
        }
        if !(self.train.lr > 0.0 && self.train.lr_floor >= 0.0 && self.train.lr_floor <= self.train.lr)
        {
            return Err(Error::validation(format!(
                "learning rates must satisfy 0 <= floor <= lr, got lr {} floor {}",
                self.train.lr, self.train.lr_floor
            )));
        }
        Ok(())
    }

    /// Digest of the canonical serialization. Field order is fixed by the
    /// struct definitions, so equal configs always hash equally.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}
