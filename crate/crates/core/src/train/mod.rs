//! Draft-model alignment and diffusion-head distillation at toy scale.
//!
//! Both stages minimise `α(t)·(reg + entropy) + (1 − α(t))·dist`, where the
//! distillation term is consistency distillation in stage 1 and distribution
//! matching in stage 2, and `α` anneals linearly across both stages.

mod gradcheck;
mod losses;
mod stages;

pub use gradcheck::{grad_check, probe_coordinates};
pub use losses::{
    cd_loss, cd_loss_grad, cd_loss_with, cd_points, dmd_grad, entropy_term, gaussian_kl,
    gaussian_score, ode_step, ode_step_span, pf_ode_euler, reg_loss, reg_loss_grad, CdConfig,
    CdPoint, CdSample,
};
pub use stages::{
    build_dataset, clip_grad, evaluate_generator, generate_one_step, train_stage1, train_stage2,
    DistillSetup, DmdMode, EpochRow, StageKind, TrainLog, TrainSample,
};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch: usize,
    pub lr_stage1: f64,
    pub lr_gen_stage2: f64,
    pub lr_fake_stage2: f64,
    /// Multiplies every learning rate; toy models need far larger steps.
    pub lr_scale: f64,
    pub alpha0: f64,
    #[serde(rename = "alphaT")]
    pub alpha_t: f64,
    /// Annealing span; `None` means `epochs_stage1 + epochs_stage2`.
    pub total_epochs: Option<usize>,
    /// Overrides the schedule with a constant.
    pub fixed_alpha: Option<f64>,
    pub entropy_enabled: bool,
    /// Weight of the entropy term relative to the regression term.
    pub entropy_weight: f64,
    pub reg_beta: f64,
    /// Let the distillation gradient reach the draft through its feature.
    pub dist_into_draft: bool,
    pub optimizer: Optimizer,
    pub cd: CdConfig,
    pub dmd_mode: DmdMode,
    /// DMD noise levels are drawn from `[lo, hi]·T`.
    pub dmd_time_range: (f64, f64),
    /// Absolute loss above which training is declared diverged.
    pub divergence_limit: f64,
    /// Rescale each model's gradient to at most this global norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 20,
            epochs_stage2: 10,
            batch: 32,
            lr_stage1: 1e-4,
            lr_gen_stage2: 2e-5,
            lr_fake_stage2: 1e-5,
            lr_scale: 1.0,
            alpha0: 0.95,
            alpha_t: 0.05,
            total_epochs: None,
            fixed_alpha: None,
            entropy_enabled: true,
            entropy_weight: 1.0,
            reg_beta: 1.0,
            dist_into_draft: true,
            optimizer: Optimizer::Sgd,
            cd: CdConfig::default(),
            dmd_mode: DmdMode::Analytic,
            dmd_time_range: (0.02, 0.98),
            divergence_limit: 1e6,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn total(&self) -> usize {
        self.total_epochs
            .unwrap_or(self.epochs_stage1 + self.epochs_stage2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha_t && self.alpha_t < self.alpha0 && self.alpha0 < 1.0) {
            return Err(invalid("need 0 < alphaT < alpha0 < 1"));
        }
        for (name, lr) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_gen_stage2", self.lr_gen_stage2),
            ("lr_fake_stage2", self.lr_fake_stage2),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr_scale >= 0.0 && self.lr_scale.is_finite()) {
            return Err(invalid("lr_scale must be >= 0"));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be >= 1"));
        }
        if self.total() == 0 {
            return Err(invalid("total epochs must be >= 1"));
        }
        if let Some(a) = self.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid("fixed_alpha must lie in [0, 1]"));
            }
        }
        if !(self.reg_beta > 0.0) {
            return Err(invalid("reg_beta must be > 0"));
        }
        let (lo, hi) = self.dmd_time_range;
        if !(0.0 < lo && lo < hi && hi <= 1.0) {
            return Err(invalid("dmd_time_range must satisfy 0 < lo < hi <= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("grad_clip must be positive"));
            }
        }
        self.cd.validate()
    }

    /// Active loss terms. Ablating the entropy term removes it here.
    pub fn registry(&self) -> Vec<LossTerm> {
        let mut terms = vec![LossTerm::Reg];
        if self.entropy_enabled {
            terms.push(LossTerm::Entropy);
        }
        terms.extend([LossTerm::Cd, LossTerm::Dmd]);
        terms
    }

    /// `α` for an epoch, honouring `fixed_alpha`.
    pub fn alpha_at(&self, epoch: usize) -> Result<f64> {
        match self.fixed_alpha {
            Some(a) => Ok(a),
            None => alpha_schedule(epoch as f64, self),
        }
    }
}

/// Every loss the trainer knows about. There is no token-classification term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Reg,
    Entropy,
    Cd,
    Dmd,
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTerm::Reg => "reg",
            LossTerm::Entropy => "entropy",
            LossTerm::Cd => "cd",
            LossTerm::Dmd => "dmd",
        })
    }
}

/// Linear anneal from `alpha0` at `t = 0` to `alphaT` at `t = T_total`.
pub fn alpha_schedule(t: f64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total() as f64;
    if !(0.0..=total).contains(&t) {
        return Err(Error::StepOutOfRange {
            t,
            max: cfg.total(),
        });
    }
    let s = t / total;
    Ok((1.0 - s) * cfg.alpha0 + s * cfg.alpha_t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub entropy: f64,
    pub dist: f64,
    pub alpha: f64,
    pub total: f64,
}

/// `alpha·(reg + entropy) + (1 − alpha)·dist`.
pub fn total_loss(reg: f64, entropy: f64, dist: f64, alpha: f64) -> LossBreakdown {
    LossBreakdown {
        reg,
        entropy,
        dist,
        alpha,
        total: alpha * (reg + entropy) + (1.0 - alpha) * dist,
    }
}

/// Parameter update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }

    pub fn state(&self, n: usize) -> OptState {
        OptState {
            rule: *self,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Per-parameter-vector optimiser memory.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    rule: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl OptState {
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.rule {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.step += 1;
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}
