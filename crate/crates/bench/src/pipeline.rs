//! Per-seed model construction, training and calibration.

use anyhow::Context;
use cspd_core::entropy::{collect_indicators, CalibrationRecord};
use cspd_core::models::{init_draft_from_target, InitScales, MlpDenoiser};
use cspd_core::speculative::SpecConfig;
use cspd_core::train::{
    build_dataset, evaluate_generator, train_stage1, train_stage2, DistillSetup, TrainLog,
    TrainSample,
};
use cspd_core::{AnalyticGaussianModel, ArModel, Error, LatentToken, RandomSource, ToyARModel};

use crate::config::{CalibrationSource, ExperimentConfig, ModelSpec, Pipeline, ToySpec};

/// Toy target, draft and distillation state for one seed.
#[derive(Clone, Debug)]
pub struct ToyModels {
    pub target: ToyARModel,
    pub draft: ToyARModel,
    pub student: MlpDenoiser,
    pub conditions: Vec<LatentToken>,
    pub data: Vec<TrainSample>,
    pub setup: DistillSetup,
}

#[derive(Clone, Debug)]
pub enum Models {
    Analytic {
        target: AnalyticGaussianModel,
        draft: AnalyticGaussianModel,
    },
    Toy(Box<ToyModels>),
}

impl Models {
    pub fn target(&self) -> &dyn ArModel {
        match self {
            Models::Analytic { target, .. } => target,
            Models::Toy(m) => &m.target,
        }
    }

    pub fn draft(&self) -> &dyn ArModel {
        match self {
            Models::Analytic { draft, .. } => draft,
            Models::Toy(m) => &m.draft,
        }
    }

    /// Condition used by trial `i`.
    pub fn condition(&self, i: usize) -> LatentToken {
        match self {
            Models::Analytic { target, .. } => LatentToken::zeros(target.dim()),
            Models::Toy(m) => m.conditions[i % m.conditions.len()].clone(),
        }
    }
}

/// Everything the benchmark needs from one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub models: Models,
    /// `cfg.spec` with the calibrated threshold substituted when requested.
    pub spec: SpecConfig,
    pub calibration: Option<CalibrationRecord>,
    pub logs: Vec<TrainLog>,
    /// One-step generator distance after training, when a distillation stage ran.
    pub generator_distance: Option<f64>,
    /// Divergence message when training stopped early.
    pub diverged: Option<String>,
}

fn build_toy(
    spec: &ToySpec,
    cfg: &ExperimentConfig,
    root: &RandomSource,
) -> anyhow::Result<ToyModels> {
    let scales = InitScales {
        qk: spec.qk_scale,
        v: spec.v_scale,
        head_mean: spec.head_mean_scale,
        head_logvar: spec.head_logvar,
    };
    let mut target = ToyARModel::random(
        spec.dim,
        spec.target_depth,
        spec.heads,
        &scales,
        &mut root.substream("target"),
    )?;
    for block in target.layers.iter_mut().skip(spec.draft_depth) {
        for h in &mut block.heads {
            h.wv.mapv_inplace(|w| w * spec.deep_v_scale);
        }
    }
    let data_spec = &cfg.data;
    let conditions = (0..data_spec.conditions)
        .map(|i| {
            let v = root.substream_at("cond", &[i as u64]).normal_vec(spec.dim);
            LatentToken::new(
                v.into_iter()
                    .map(|x| x * data_spec.condition_scale)
                    .collect(),
            )
        })
        .collect::<cspd_core::Result<Vec<_>>>()?;
    let data = build_dataset(
        &target,
        &conditions,
        data_spec.samples,
        (data_spec.min_len, data_spec.max_len),
        root,
    )?;
    let setup = DistillSetup::from_target(&target, data_spec.schedule_steps)?;
    let mut draft = init_draft_from_target(&target, spec.draft_depth)?;
    if spec.draft_sharpen != 1.0 {
        draft.sharpen_attention(spec.draft_sharpen);
    }
    let student = MlpDenoiser::random(
        spec.dim,
        spec.dim,
        spec.student_hidden,
        &mut root.substream("student"),
    )?;
    Ok(ToyModels {
        target,
        draft,
        student,
        conditions,
        data,
        setup,
    })
}

/// Untrained models for `seed`.
pub fn build_models(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<Models> {
    let root = RandomSource::new(seed);
    Ok(match &cfg.model {
        ModelSpec::Analytic {
            target_mean,
            target_var,
            draft_mean,
            draft_var,
        } => Models::Analytic {
            target: AnalyticGaussianModel::from_moments(target_mean.clone(), target_var.clone())?,
            draft: AnalyticGaussianModel::from_moments(draft_mean.clone(), draft_var.clone())?,
        },
        ModelSpec::Toy(spec) => Models::Toy(Box::new(build_toy(spec, cfg, &root)?)),
    })
}

/// Diverged runs keep the last finite weights and report the message.
fn absorb_divergence(
    result: cspd_core::Result<TrainLog>,
    logs: &mut Vec<TrainLog>,
) -> anyhow::Result<Option<String>> {
    match result {
        Ok(log) => {
            logs.push(log);
            Ok(None)
        }
        Err(e @ Error::Diverged { .. }) => {
            log::warn!("{e}");
            Ok(Some(e.to_string()))
        }
        Err(e) => Err(e.into()),
    }
}

/// Build, train and calibrate the models of one seed.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<Prepared> {
    let root = RandomSource::new(seed);
    let mut models = build_models(cfg, seed)?;
    let mut logs = Vec::new();
    let mut diverged = None;
    let mut generator_distance = None;
    if let Models::Toy(m) = &mut models {
        let m = &mut **m;
        let train = &cfg.train;
        if matches!(cfg.pipeline, Pipeline::Stage1 | Pipeline::TwoStage) {
            let r = train_stage1(
                &mut m.draft,
                &mut m.student,
                &m.setup,
                &m.data,
                train,
                &root,
            );
            diverged = absorb_divergence(r, &mut logs).context("stage 1")?;
        }
        if diverged.is_none() && matches!(cfg.pipeline, Pipeline::TwoStage | Pipeline::Stage2Only) {
            let initialised = cfg.pipeline == Pipeline::TwoStage;
            let r = train_stage2(
                &mut m.draft,
                &mut m.student,
                &m.setup,
                &m.data,
                train,
                initialised,
                &root,
            );
            diverged = absorb_divergence(r, &mut logs).context("stage 2")?;
        }
        if cfg.pipeline != Pipeline::None {
            generator_distance = Some(evaluate_generator(
                &m.student,
                &m.draft,
                &m.setup,
                &m.data,
                cfg.data.eval_samples,
                &root.substream("generator-eval"),
            )?);
        }
    }
    let mut spec = cfg.spec.clone();
    let calibration = match (cfg.calibrate, &models) {
        (Some(source), Models::Toy(m)) => {
            let sequences: Vec<_> = m
                .data
                .iter()
                .map(|s| (s.ctx.clone(), s.condition.clone()))
                .collect();
            let model: &ToyARModel = match source {
                CalibrationSource::Draft => &m.draft,
                CalibrationSource::Target => &m.target,
            };
            let stats = collect_indicators(model, &sequences, &cfg.threshold)?
                .finish(cfg.threshold.shallow_layer)?;
            let record = CalibrationRecord::new(&stats, &cfg.threshold);
            spec.tau_ent = record.tau;
            spec.shallow_layer = cfg.threshold.shallow_layer;
            Some(record)
        }
        (Some(_), Models::Analytic { .. }) => anyhow::bail!("calibration needs toy models"),
        (None, _) => None,
    };
    Ok(Prepared {
        seed,
        models,
        spec,
        calibration,
        logs,
        generator_distance,
        diverged,
    })
}
