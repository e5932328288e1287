//! Strict TOML run configuration.
//!
//! Unknown keys are errors. Student and teacher step counts, the shaping
//! coefficient, gate temperature, EMA decay and the horizon set have no
//! defaults and must appear in the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::objective::DivergenceWeights;
use crate::optim::AdamConfig;
use crate::reward::{Decoder, RewardKind, RewardLoss, RewardModel};
use crate::schedule::HorizonSet;
use crate::task::ToyTask;
use crate::tensor::Tensor;
use crate::train::{Ablation, Scorer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: ToyTask,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub reward: RewardConfig,
    pub sampler: SamplerConfig,
    pub rats: RatsConfig,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub adapter_rank: usize,
    /// Pretrained backbone checkpoint, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub model: RewardKind,
    #[serde(default = "default_loss")]
    pub loss: RewardLoss,
    /// Rows of a fixed linear decoder; absent means identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<Vec<Vec<f64>>>,
}

fn default_loss() -> RewardLoss {
    RewardLoss::Negate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub student_steps: usize,
    pub teacher_steps: usize,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatsConfig {
    pub iterations: usize,
    pub batch: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub horizons: HorizonConfig,
    #[serde(default)]
    pub divergence: DivergenceWeights,
    pub optimizer: AdamConfig,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub shared_noise: bool,
    #[serde(default)]
    pub wall_clock: bool,
    #[serde(default)]
    pub trajectory_dump: bool,
}

fn default_ablation() -> Ablation {
    Ablation::Full
}

fn default_smoothing() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub steps: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HorizonScheme {
    /// The configured targets and weights.
    NonUniform,
    /// The configured targets with equal weights.
    Uniform,
    /// Only the lowest-noise target.
    SingleHorizon,
}

impl HorizonScheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::NonUniform => "non-uniform",
            Self::Uniform => "uniform",
            Self::SingleHorizon => "single-horizon",
        }
    }

    pub fn apply(self, base: &HorizonSet) -> Result<HorizonSet> {
        match self {
            Self::NonUniform => Ok(base.clone()),
            Self::Uniform => HorizonSet::uniform(base.targets().to_vec()),
            Self::SingleHorizon => {
                let last = *base.targets().last().expect("validated non-empty");
                HorizonSet::new(vec![last], vec![1.0])
            }
        }
    }
}

/// Cells are the product of the listed modes, alphas and schemes; every cell
/// runs every seed. An omitted axis uses the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateGrid {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<Ablation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alphas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub horizon_schemes: Vec<HorizonScheme>,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.task.validate().map_err(wrap)?;
        self.arch().validate().map_err(wrap)?;
        self.horizons().map_err(wrap)?;
        self.scorer().map_err(wrap)?;
        self.train_config().validate().map_err(wrap)?;
        self.pretrain.optimizer.validate().map_err(wrap)?;
        if self.pretrain.batch == 0 {
            return Err(Error::Config("pretrain.batch must be positive".into()));
        }
        if self.eval.samples == 0 || self.eval.steps.is_empty() || self.eval.steps.contains(&0) {
            return Err(Error::Config(
                "eval needs samples > 0 and a non-empty list of positive step counts".into(),
            ));
        }
        if let Some(grid) = &self.ablate {
            if grid.seeds.is_empty() {
                return Err(Error::Config("ablate.seeds is empty".into()));
            }
            if grid.alphas.iter().any(|a| !(*a >= 0.0)) {
                return Err(Error::Config("ablate.alphas must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Architecture {
        Architecture {
            dim: self.task.dim,
            conditions: self.task.conditions,
            hidden: self.model.hidden.clone(),
            adapter_rank: self.model.adapter_rank,
        }
    }

    pub fn horizons(&self) -> Result<HorizonSet> {
        let h = &self.rats.horizons;
        HorizonSet::new(h.targets.clone(), h.weights.clone())
    }

    pub fn scorer(&self) -> Result<Scorer> {
        let decoder = match &self.reward.decoder {
            None => Decoder::Identity,
            Some(rows) => {
                let a = Tensor::from_rows(rows)?;
                if a.cols() != self.task.dim || a.rows() == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "decoder must be [d_out, {}], got {:?}",
                        self.task.dim,
                        a.shape()
                    )));
                }
                Decoder::Linear(a)
            }
        };
        // Centers are the task modes seen through the decoder.
        let centers = match &decoder {
            Decoder::Identity => self.task.centers(),
            Decoder::Linear(a) => self.task.centers().matmul(&a.transpose()?)?,
        };
        let reward = RewardModel::new(self.reward.model.clone(), centers)?;
        Ok(Scorer { decoder, reward })
    }

    pub fn train_config(&self) -> TrainConfig {
        let r = &self.rats;
        TrainConfig {
            student_steps: self.sampler.student_steps,
            teacher_steps: self.sampler.teacher_steps,
            shift: self.sampler.shift,
            batch: r.batch,
            iterations: r.iterations,
            alpha: r.alpha,
            gamma: r.gamma,
            temperature: r.temperature,
            horizons: self
                .horizons()
                .unwrap_or_else(|_| HorizonSet::standard()),
            divergence: r.divergence,
            reward_loss: self.reward.loss,
            optimizer: r.optimizer,
            seed: self.seed,
            ablation: r.ablation,
            smoothing: r.smoothing,
            shared_noise: r.shared_noise,
            wall_clock: r.wall_clock,
        }
    }

    /// The backbone path resolved against `base_dir`.
    pub fn backbone_path(&self, base_dir: &Path) -> Option<PathBuf> {
        self.model.backbone.as_ref().map(|p| base_dir.join(p))
    }
}
