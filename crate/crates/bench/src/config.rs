use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use cspd_core::entropy::ThresholdConfig;
use cspd_core::speculative::SpecConfig;
use cspd_core::train::{CdConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Target and draft construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Context-free Gaussian models; next-token densities are known exactly.
    Analytic {
        target_mean: Vec<f64>,
        target_var: Vec<f64>,
        draft_mean: Vec<f64>,
        draft_var: Vec<f64>,
    },
    /// Random attention target; the draft copies its first `draft_depth`
    /// blocks and head.
    Toy(ToySpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub dim: usize,
    pub target_depth: usize,
    pub draft_depth: usize,
    pub heads: usize,
    /// Std of query/key weights.
    pub qk_scale: f64,
    /// Std of value weights.
    pub v_scale: f64,
    /// Multiplier on the value weights of target blocks beyond `draft_depth`.
    pub deep_v_scale: f64,
    pub head_mean_scale: f64,
    pub head_logvar: f64,
    /// Attention logits of the draft are multiplied by this after copying.
    pub draft_sharpen: f64,
    pub student_hidden: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            dim: 4,
            target_depth: 8,
            draft_depth: 2,
            heads: 2,
            qk_scale: 0.05,
            v_scale: 0.2,
            deep_v_scale: 0.03,
            head_mean_scale: 0.3,
            head_logvar: -1.0,
            draft_sharpen: 200.0,
            student_hidden: 16,
        }
    }
}

/// Training data and distillation setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Contexts sampled from the target.
    pub samples: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Distinct conditions; condition entries are `N(0, condition_scale²)`.
    pub conditions: usize,
    pub condition_scale: f64,
    /// Length of the distillation noise schedule.
    pub schedule_steps: usize,
    /// One-step samples drawn to measure the generator's distance.
    pub eval_samples: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            samples: 128,
            min_len: 2,
            max_len: 12,
            conditions: 4,
            condition_scale: 1.0,
            schedule_steps: 1000,
            eval_samples: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Benchmark the models as built.
    None,
    /// Consistency distillation with draft alignment.
    Stage1,
    /// Stage 1 followed by distribution matching.
    TwoStage,
    /// Distribution matching from a freshly initialised student.
    Stage2Only,
}

/// Model whose shallow-layer entropy sets the early-stop threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    Draft,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataSpec,
    pub pipeline: Pipeline,
    #[serde(default)]
    pub spec: SpecConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub threshold: ThresholdConfig,
    /// Replace `spec.tau_ent` by a threshold calibrated on the training data.
    pub calibrate: Option<CalibrationSource>,
    pub seeds: Vec<u64>,
    pub seq_len: usize,
    /// Sequences generated per seed.
    pub trials: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Entropy-alignment task: near-uniform target attention, a sharpened
    /// two-block draft, stage-1 training, rejection measured without early
    /// stopping.
    pub fn entropy_task() -> Self {
        Self {
            experiment: "entropy-alignment".into(),
            model: ModelSpec::Toy(ToySpec::default()),
            data: DataSpec::default(),
            pipeline: Pipeline::Stage1,
            spec: SpecConfig {
                tau_ent: 0.0,
                ..Default::default()
            },
            train: TrainConfig {
                epochs_stage1: 40,
                epochs_stage2: 10,
                batch: 16,
                lr_scale: 1000.0,
                cd: CdConfig {
                    span: 100.0,
                    substeps: 10,
                },
                ..Default::default()
            },
            threshold: ThresholdConfig::default(),
            calibrate: None,
            seeds: vec![1, 2, 3, 4, 5],
            seq_len: 16,
            trials: 500,
            out_dir: PathBuf::from("out/entropy-alignment"),
        }
    }

    /// One-dimensional distillation task for the two-stage schedule.
    pub fn distill_task() -> Self {
        Self {
            experiment: "two-stage-distillation".into(),
            model: ModelSpec::Toy(ToySpec {
                dim: 1,
                target_depth: 4,
                draft_depth: 2,
                heads: 1,
                qk_scale: 0.3,
                v_scale: 0.2,
                deep_v_scale: 1.0,
                draft_sharpen: 1.0,
                ..Default::default()
            }),
            data: DataSpec {
                samples: 64,
                min_len: 2,
                max_len: 6,
                conditions: 1,
                condition_scale: 0.0,
                ..Default::default()
            },
            pipeline: Pipeline::TwoStage,
            spec: SpecConfig::default(),
            train: TrainConfig {
                epochs_stage1: 20,
                epochs_stage2: 10,
                batch: 16,
                lr_scale: 1000.0,
                cd: CdConfig {
                    span: 100.0,
                    substeps: 10,
                },
                ..Default::default()
            },
            threshold: ThresholdConfig::default(),
            calibrate: None,
            seeds: vec![1, 2, 3, 4, 5],
            seq_len: 16,
            trials: 40,
            out_dir: PathBuf::from("out/two-stage-distillation"),
        }
    }

    /// Draft whose attention is sharpened until nearly one-hot, with the
    /// threshold calibrated on the target's shallow layer.
    pub fn early_stop_task() -> Self {
        Self {
            experiment: "early-stop".into(),
            model: ModelSpec::Toy(ToySpec {
                qk_scale: 0.3,
                deep_v_scale: 1.0,
                draft_sharpen: 1e4,
                ..Default::default()
            }),
            data: DataSpec {
                samples: 32,
                ..Default::default()
            },
            pipeline: Pipeline::None,
            spec: SpecConfig::default(),
            train: TrainConfig::default(),
            threshold: ThresholdConfig::default(),
            calibrate: Some(CalibrationSource::Target),
            seeds: vec![1, 2, 3],
            seq_len: 24,
            trials: 40,
            out_dir: PathBuf::from("out/early-stop"),
        }
    }

    /// Analytic target `N(0, 1)` against draft `N(mu, 1)`.
    pub fn analytic_task(mu: f64) -> Self {
        Self {
            experiment: format!("analytic-mu-{mu}"),
            model: ModelSpec::Analytic {
                target_mean: vec![0.0],
                target_var: vec![1.0],
                draft_mean: vec![mu],
                draft_var: vec![1.0],
            },
            data: DataSpec::default(),
            pipeline: Pipeline::None,
            spec: SpecConfig::default(),
            train: TrainConfig::default(),
            threshold: ThresholdConfig::default(),
            calibrate: None,
            seeds: vec![1],
            seq_len: 10,
            trials: 2000,
            out_dir: PathBuf::from(format!("out/analytic-mu-{mu}")),
        }
    }

    pub fn preset(name: &str) -> anyhow::Result<Self> {
        Ok(match name {
            "entropy" => Self::entropy_task(),
            "distill" => Self::distill_task(),
            "early-stop" => Self::early_stop_task(),
            "analytic" => Self::analytic_task(0.5),
            other => {
                bail!("unknown preset {other:?}; expected entropy, distill, early-stop or analytic")
            }
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()
            .with_context(|| format!("validating config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(!self.seeds.is_empty(), "at least one seed is required");
        ensure!(self.seq_len >= 1, "seq_len must be >= 1");
        ensure!(self.trials >= 1, "trials must be >= 1");
        self.spec.validate()?;
        self.train.validate()?;
        let depth = match &self.model {
            ModelSpec::Analytic {
                target_mean,
                target_var,
                draft_mean,
                draft_var,
            } => {
                let d = target_mean.len();
                ensure!(
                    d >= 1
                        && [target_var.len(), draft_mean.len(), draft_var.len()]
                            .iter()
                            .all(|&n| n == d),
                    "analytic model moments must share one dimension >= 1"
                );
                ensure!(
                    self.pipeline == Pipeline::None,
                    "analytic models cannot be trained"
                );
                2
            }
            ModelSpec::Toy(t) => {
                ensure!(t.dim >= 1 && t.heads >= 1, "toy dim and heads must be >= 1");
                ensure!(
                    2 <= t.draft_depth && t.draft_depth < t.target_depth,
                    "need 2 <= draft_depth < target_depth"
                );
                ensure!(t.draft_sharpen > 0.0, "draft_sharpen must be > 0");
                ensure!(t.student_hidden >= 1, "student_hidden must be >= 1");
                t.draft_depth
            }
        };
        self.threshold.validate(depth)?;
        let d = &self.data;
        ensure!(d.samples >= 2, "data.samples must be >= 2");
        ensure!(
            1 <= d.min_len && d.min_len <= d.max_len,
            "need 1 <= data.min_len <= data.max_len"
        );
        ensure!(d.conditions >= 1, "data.conditions must be >= 1");
        ensure!(d.schedule_steps >= 1, "data.schedule_steps must be >= 1");
        ensure!(d.eval_samples >= 1, "data.eval_samples must be >= 1");
        if self.calibrate.is_some() && matches!(self.model, ModelSpec::Analytic { .. }) {
            bail!("calibration needs toy models");
        }
        Ok(())
    }
}
