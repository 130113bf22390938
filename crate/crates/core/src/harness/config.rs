use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ModelDims};
use crate::error::{Error, Result};
use crate::flow::WeightSchedule;
use crate::pfd::{AdapterConfig, LossWeights, OptimizerConfig, Regime};
use crate::sampler::SamplerConfig;
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Fine-tuning steps per configuration.
    pub steps: usize,
    pub batch: usize,
    /// Shared joint pretraining before any configuration runs (per seed).
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Trajectories generated per seed, split 90/10.
    pub dataset_size: usize,
    /// Steps between evaluations of the fixed monitor batch.
    pub eval_every: usize,
    pub monitor_batch: usize,
    /// Success radius around the goal.
    pub success_radius: f64,
    /// Multiplier applied to actions before flow matching; unset means the
    /// chunk length, which makes each step of a unit-distance goal unit length.
    pub action_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            pretrain_steps: 1500,
            pretrain_lr: 1e-3,
            dataset_size: 2000,
            eval_every: 100,
            monitor_batch: 64,
            success_radius: 0.2,
            action_scale: None,
        }
    }
}

/// The configurations of the probe table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeName {
    Baseline,
    Pfd,
    PureFinetune,
    ShuffledFuture,
    BudgetRealloc,
    AdapterOnly,
    HalfDepth,
}

impl ProbeName {
    pub const ALL: [ProbeName; 7] = [
        ProbeName::Baseline,
        ProbeName::Pfd,
        ProbeName::PureFinetune,
        ProbeName::ShuffledFuture,
        ProbeName::BudgetRealloc,
        ProbeName::AdapterOnly,
        ProbeName::HalfDepth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeName::Baseline => "baseline",
            ProbeName::Pfd => "pfd",
            ProbeName::PureFinetune => "pure_finetune",
            ProbeName::ShuffledFuture => "shuffled_future",
            ProbeName::BudgetRealloc => "budget_realloc",
            ProbeName::AdapterOnly => "adapter_only",
            ProbeName::HalfDepth => "half_depth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown probe {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Defaults: depth 4, width 64, batch 64, 2000 steps, 5 seeds.
    Desk,
    /// Narrower model and smaller batch, sized for a single CPU core.
    Fast,
    /// Full-size proportions: 40% of blocks unfrozen and a 512-wide adapter.
    PaperRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Suite seed all run streams derive from.
    pub seed: u64,
    /// Seed indices; each is an independent replicate.
    pub seeds: Vec<u64>,
    pub probes: Vec<ProbeName>,
    /// Configuration used by `train`.
    pub probe: ProbeName,
    pub world: WorldConfig,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub regime: Regime,
    pub weights: LossWeights,
    pub schedule: WeightSchedule,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: (0..5).collect(),
            probes: ProbeName::ALL.to_vec(),
            probe: ProbeName::Pfd,
            world: WorldConfig::default(),
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            regime: Regime::Partial { k_action: 2, k_video: 2 },
            weights: LossWeights::default(),
            schedule: WeightSchedule::default(),
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self::default();
        match p {
            Preset::Desk => base,
            Preset::Fast => Self {
                backbone: BackboneConfig {
                    d_model: 32,
                    ff_hidden: 64,
                    video_tokens_per_frame: 2,
                    ..base.backbone.clone()
                },
                adapter: AdapterConfig { width: 32, tau_dim: 16 },
                train: TrainConfig {
                    batch: 16,
                    monitor_batch: 200,
                    ..base.train.clone()
                },
                ..base
            },
            Preset::PaperRatio => Self {
                backbone: BackboneConfig { depth: 5, ..base.backbone.clone() },
                regime: Regime::Partial { k_action: 2, k_video: 2 },
                adapter: AdapterConfig::full_size(),
                ..base
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            frames: self.world.frames,
            frame_dim: self.world.frame_dim,
            action_tokens: self.world.horizon,
            action_dim: self.world.action_dim,
        }
    }

    pub fn action_scale(&self) -> f64 {
        self.train.action_scale.unwrap_or(self.world.horizon as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.backbone.validate()?;
        self.adapter.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        self.sampler.validate()?;
        self.optimizer.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.probes.is_empty() {
            return Err(Error::InvalidConfig("at least one probe is required".into()));
        }
        let t = &self.train;
        if !(self.action_scale() > 0.0 && self.action_scale().is_finite()) {
            return Err(Error::InvalidConfig("action scale must be positive".into()));
        }
        if t.steps == 0 || t.batch < 2 || t.eval_every == 0 || t.monitor_batch == 0 || t.pretrain_lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("training settings out of range: {t:?}")));
        }
        let n_train = (t.dataset_size * 9 / 10).clamp(1, t.dataset_size.saturating_sub(1).max(1));
        if t.dataset_size < 2 || t.batch > n_train || t.monitor_batch > t.dataset_size - n_train {
            return Err(Error::InvalidConfig(format!(
                "dataset of {} cannot supply batch {} and monitor batch {}",
                t.dataset_size, t.batch, t.monitor_batch
            )));
        }
        if let Regime::Partial { k_action, k_video } = self.regime {
            if k_action > self.backbone.depth || k_video > self.backbone.depth {
                return Err(Error::DepthOutOfRange {
                    k: k_action.max(k_video),
                    depth: self.backbone.depth,
                });
            }
        }
        Ok(())
    }
}
