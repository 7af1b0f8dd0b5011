use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::losses::{
    cd_loss_grad, cd_points, dmd_grad, entropy_term, gaussian_kl, gaussian_score, reg_loss_grad,
    CdSample,
};
use super::{total_loss, LossBreakdown, OptState, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::latent::{
    sample_gaussian, smooth_l1, GaussianParams, LatentToken, NoiseSchedule, RandomSource,
};
use crate::models::{
    ArModel, BackwardSeeds, Denoiser, DiffusionHead, ForwardTrace, GaussianHead, HeadGrads,
    MlpDenoiser, MlpGrads, ModelGrads, ModelOutput, Params, ToyARModel,
};

/// One context drawn from the target, with everything both stages need.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// Start token followed by target-generated tokens.
    pub ctx: Vec<LatentToken>,
    pub condition: LatentToken,
    pub target_feature: Vec<f64>,
    /// Next token sampled from the target.
    pub x0: Vec<f64>,
    /// Condition for the teacher diffusion head.
    pub teacher_z: Vec<f64>,
}

/// Sample `count` contexts of `ctx_len.0..=ctx_len.1` tokens (start token
/// included) by running the target autoregressively.
pub fn build_dataset(
    target: &ToyARModel,
    conditions: &[LatentToken],
    count: usize,
    ctx_len: (usize, usize),
    rng: &RandomSource,
) -> Result<Vec<TrainSample>> {
    let (lo, hi) = ctx_len;
    if conditions.is_empty() || lo == 0 || hi < lo {
        return Err(invalid(
            "dataset needs conditions and 1 <= min_len <= max_len",
        ));
    }
    (0..count)
        .map(|i| {
            let mut r = rng.substream_at("data", &[i as u64]);
            let len = lo + (r.next_u64() % (hi - lo + 1) as u64) as usize;
            let condition = conditions[i % conditions.len()].clone();
            let mut ctx = vec![LatentToken::zeros(target.dim())];
            while ctx.len() < len {
                let out = target.forward(&ctx, &condition)?;
                ctx.push(sample_gaussian(&out.next_dist, &mut r));
            }
            let out = target.forward(&ctx, &condition)?;
            let x0 = sample_gaussian(&out.next_dist, &mut r).into_vec();
            Ok(TrainSample {
                ctx,
                condition,
                teacher_z: out.feature.clone(),
                target_feature: out.feature,
                x0,
            })
        })
        .collect()
}

/// Frozen teacher, distillation schedule, and the sample whose context
/// fixes the condition in analytic distribution matching.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSetup {
    pub teacher: DiffusionHead,
    pub sched: NoiseSchedule,
    pub anchor: usize,
}

impl DistillSetup {
    /// Teacher whose data distribution is the target's next-token head.
    pub fn from_target(target: &ToyARModel, steps: usize) -> Result<Self> {
        Ok(Self {
            teacher: DiffusionHead::teacher(Denoiser::Conditional(target.head.clone())),
            sched: NoiseSchedule::default_linear(steps)?,
            anchor: 0,
        })
    }

    /// Clean-data distribution the teacher denoises towards.
    pub fn data_dist(&self, teacher_z: &[f64]) -> Result<GaussianParams> {
        match &self.teacher.denoiser {
            Denoiser::Fixed { mean, var } => GaussianParams::new(mean.clone(), var.clone()),
            Denoiser::Conditional(head) => head.apply(teacher_z),
            Denoiser::Network(_) => Err(invalid(
                "a learned teacher has no closed-form data distribution",
            )),
        }
    }

    fn gen_time(&self) -> f64 {
        self.sched.steps() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmdMode {
    /// Fixed condition; fake score from generator batch moments.
    Analytic,
    /// Per-sample conditions; fake score from a Gaussian head fitted online.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Stage1,
    Stage2,
}

impl StageKind {
    pub fn label(self) -> &'static str {
        match self {
            StageKind::Stage1 => "stage1",
            StageKind::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub alpha: f64,
    pub reg: f64,
    pub entropy: f64,
    pub dist: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: StageKind,
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,alpha,reg,entropy,dist,total,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.alpha, r.reg, r.entropy, r.dist, r.total, r.grad_norm
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

struct Running {
    reg: f64,
    entropy: f64,
    dist: f64,
    grad_norm: f64,
    batches: usize,
}

impl Running {
    fn new() -> Self {
        Self {
            reg: 0.0,
            entropy: 0.0,
            dist: 0.0,
            grad_norm: 0.0,
            batches: 0,
        }
    }

    fn push(&mut self, b: &LossBreakdown, grad_norm: f64) {
        self.reg += b.reg;
        self.entropy += b.entropy;
        self.dist += b.dist;
        self.grad_norm += grad_norm;
        self.batches += 1;
    }

    fn row(&self, epoch: usize, alpha: f64) -> EpochRow {
        let n = self.batches.max(1) as f64;
        let b = total_loss(self.reg / n, self.entropy / n, self.dist / n, alpha);
        EpochRow {
            epoch,
            alpha,
            reg: b.reg,
            entropy: b.entropy,
            dist: b.dist,
            total: b.total,
            grad_norm: self.grad_norm / n,
        }
    }
}

/// Regression and entropy terms for one sample, with their draft seeds
/// already weighted by `weight`.
struct ArTerms {
    out: ModelOutput,
    trace: ForwardTrace,
    reg: f64,
    entropy: f64,
    seeds: BackwardSeeds,
}

fn ar_terms(
    draft: &ToyARModel,
    s: &TrainSample,
    cfg: &TrainConfig,
    weight: f64,
) -> Result<ArTerms> {
    let (out, trace) = draft.forward_traced(&s.ctx, &s.condition)?;
    let reg = smooth_l1(&out.feature, &s.target_feature, cfg.reg_beta)?;
    let d_feature = reg_loss_grad(&out.feature, &s.target_feature, cfg.reg_beta)?
        .into_iter()
        .map(|g| g * weight)
        .collect();
    let mut seeds = BackwardSeeds {
        d_feature: Some(d_feature),
        ..Default::default()
    };
    let mut entropy = 0.0;
    if cfg.entropy_enabled {
        let (value, mut d_attn) = entropy_term(&out)?;
        entropy = cfg.entropy_weight * value;
        let w = weight * cfg.entropy_weight;
        for (_, maps) in d_attn.iter_mut() {
            maps.iter_mut().for_each(|m| m.mapv_inplace(|v| v * w));
        }
        seeds.d_attn = d_attn;
    }
    Ok(ArTerms {
        out,
        trace,
        reg,
        entropy,
        seeds,
    })
}

fn add_feature_grad(seeds: &mut BackwardSeeds, dz: &[f64], factor: f64) {
    let df = seeds.d_feature.get_or_insert_with(|| vec![0.0; dz.len()]);
    df.iter_mut().zip(dz).for_each(|(a, b)| *a += factor * b);
}

fn check_loss(stage: StageKind, epoch: usize, b: &LossBreakdown, limit: f64) -> Result<()> {
    if !b.total.is_finite() || b.total.abs() > limit {
        return Err(Error::Diverged {
            stage: stage.label(),
            epoch,
            detail: format!(
                "total loss {} (reg {}, entropy {}, dist {})",
                b.total, b.reg, b.entropy, b.dist
            ),
        });
    }
    Ok(())
}

fn check_params(stage: StageKind, epoch: usize, what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            stage: stage.label(),
            epoch,
            detail: format!("non-finite {what} parameters"),
        });
    }
    Ok(())
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Scale `grad` down to global norm `max` when it exceeds it.
pub fn clip_grad(grad: &mut [f64], max: Option<f64>) {
    if let Some(max) = max {
        let norm = norm2(grad).sqrt();
        if norm > max {
            let f = max / norm;
            grad.iter_mut().for_each(|g| *g *= f);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn step<P: Params>(
    model: &mut P,
    opt: &mut OptState,
    mut grad: Vec<f64>,
    lr: f64,
    clip: Option<f64>,
    stage: StageKind,
    epoch: usize,
    what: &str,
) -> Result<()> {
    clip_grad(&mut grad, clip);
    let mut p = model.flatten();
    opt.apply(&mut p, &grad, lr);
    check_params(stage, epoch, what, &p)?;
    model.assign(&p)
}

fn batches(n: usize, batch: usize, rng: RandomSource) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng;
    rng.shuffle(&mut order);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Stage 1: `α(reg + entropy) + (1 − α)·CD`, updating the draft and the
/// student head with SGD (or Adam) at `lr_stage1·lr_scale`.
pub fn train_stage1(
    draft: &mut ToyARModel,
    student: &mut MlpDenoiser,
    setup: &DistillSetup,
    data: &[TrainSample],
    cfg: &TrainConfig,
    rng: &RandomSource,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training data is empty"));
    }
    let stage = StageKind::Stage1;
    let lr = cfg.lr_stage1 * cfg.lr_scale;
    let mut opt_draft = cfg.optimizer.state(draft.num_params());
    let mut opt_student = cfg.optimizer.state(student.num_params());
    let mut log = TrainLog {
        stage,
        rows: Vec::new(),
    };

    for epoch in 0..cfg.epochs_stage1 {
        let alpha = cfg.alpha_at(epoch)?;
        let mut run = Running::new();
        let shuffle = rng.substream_at("shuffle", &[1, epoch as u64]);
        for (bi, chunk) in batches(data.len(), cfg.batch, shuffle).iter().enumerate() {
            let bs = chunk.len() as f64;
            let mut g_draft = draft.zero_grads();
            let mut g_student = student.zero_grads();
            let (mut reg, mut ent, mut cd) = (0.0, 0.0, 0.0);
            for (j, &idx) in chunk.iter().enumerate() {
                let s = &data[idx];
                let mut terms = ar_terms(draft, s, cfg, alpha / bs)?;
                let sample = CdSample {
                    x0: s.x0.clone(),
                    z: terms.out.feature.clone(),
                    teacher_z: s.teacher_z.clone(),
                };
                let point_rng = rng.substream_at("cd-point", &[epoch as u64, bi as u64, j as u64]);
                let points =
                    cd_points(&setup.teacher, &[sample], &setup.sched, &cfg.cd, &point_rng)?;
                let (value, grads, dzs) = cd_loss_grad(student, &points, &setup.sched)?;
                g_student.add_scaled(&grads, (1.0 - alpha) / bs);
                if cfg.dist_into_draft {
                    add_feature_grad(&mut terms.seeds, &dzs[0], (1.0 - alpha) / bs);
                }
                g_draft.add_scaled(&draft.backward(&terms.trace, &terms.seeds)?, 1.0);
                reg += terms.reg / bs;
                ent += terms.entropy / bs;
                cd += value / bs;
            }
            let b = total_loss(reg, ent, cd, alpha);
            check_loss(stage, epoch, &b, cfg.divergence_limit)?;
            let (gd, gs) = (g_draft.flatten(), g_student.flatten());
            run.push(&b, (norm2(&gd) + norm2(&gs)).sqrt());
            step(
                draft,
                &mut opt_draft,
                gd,
                lr,
                cfg.grad_clip,
                stage,
                epoch,
                "draft",
            )?;
            step(
                student,
                &mut opt_student,
                gs,
                lr,
                cfg.grad_clip,
                stage,
                epoch,
                "student",
            )?;
        }
        let row = run.row(epoch, alpha);
        info!(
            "stage1 epoch {epoch}: alpha {:.3} reg {:.5} entropy {:.5} cd {:.5} total {:.5}",
            row.alpha, row.reg, row.entropy, row.dist, row.total
        );
        log.rows.push(row);
    }
    Ok(log)
}

/// One-step generation: the student maps pure noise at `t = T` to a sample.
pub fn generate_one_step(
    student: &MlpDenoiser,
    z: &[f64],
    count: usize,
    sched: &NoiseSchedule,
    rng: &RandomSource,
) -> Result<Vec<Vec<f64>>> {
    let t = sched.steps() as f64;
    (0..count)
        .map(|i| {
            let eps = rng
                .substream_at("generate", &[i as u64])
                .normal_vec(student.dim());
            student.forward(&eps, t, z, sched).map(|(x, _)| x)
        })
        .collect()
}

/// Kolmogorov-Smirnov distance between the anchor's one-step samples,
/// standardised by the teacher's data distribution, and `N(0, 1)`; the
/// maximum over coordinates.
pub fn evaluate_generator(
    student: &MlpDenoiser,
    draft: &ToyARModel,
    setup: &DistillSetup,
    data: &[TrainSample],
    count: usize,
    rng: &RandomSource,
) -> Result<f64> {
    let anchor = data
        .get(setup.anchor)
        .ok_or_else(|| invalid("anchor index outside the dataset"))?;
    let z = draft.forward(&anchor.ctx, &anchor.condition)?.feature;
    let real = setup.data_dist(&anchor.teacher_z)?;
    let xs = generate_one_step(student, &z, count, &setup.sched, rng)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut worst: f64 = 0.0;
    for k in 0..real.dim() {
        let mut col: Vec<f64> = xs
            .iter()
            .map(|x| (x[k] - real.mean()[k]) / real.var()[k].sqrt())
            .collect();
        col.sort_by(f64::total_cmp);
        let n = col.len() as f64;
        for (i, x) in col.iter().enumerate() {
            let f = normal.cdf(*x);
            worst = worst.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
        }
    }
    Ok(worst)
}

/// Diffuse one generator output to a random noise level and return the
/// generator-space DMD gradient `√ᾱ·(s_fake − s_real)` at that point.
fn dmd_at_noise(
    x: &[f64],
    real: &GaussianParams,
    fake: &GaussianParams,
    setup: &DistillSetup,
    cfg: &TrainConfig,
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    let (lo, hi) = cfg.dmd_time_range;
    let t = (lo + rng.uniform() * (hi - lo)) * setup.gen_time();
    let ab = setup.sched.alpha_bar_at(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t: Vec<f64> = x.iter().map(|x| a * x + s * rng.normal()).collect();
    let diffused = |p: &GaussianParams| -> (Vec<f64>, Vec<f64>) {
        (
            p.mean().iter().map(|m| a * m).collect(),
            p.var().iter().map(|v| ab * v + 1.0 - ab).collect(),
        )
    };
    let (mr, vr) = diffused(real);
    let (mf, vf) = diffused(fake);
    let g = dmd_grad(
        &[x_t],
        |y| Ok(gaussian_score(y, &mr, &vr)),
        |y| Ok(gaussian_score(y, &mf, &vf)),
    )?;
    Ok(g[0].iter().map(|v| a * v).collect())
}

fn batch_moments(xs: &[Vec<f64>]) -> Result<GaussianParams> {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n)
        .collect();
    let var = (0..d)
        .map(|k| (xs.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / n).max(1e-6))
        .collect();
    GaussianParams::new(mean, var)
}

/// Stage 2: `α(reg + entropy) + (1 − α)·DMD`, continuing the schedule at
/// epoch offset `epochs_stage1`. The logged distance is `KL(fake ‖ real)`.
///
/// Running without a stage-1 initialisation is allowed (the ablation does
/// so) but logged as a warning.
pub fn train_stage2(
    draft: &mut ToyARModel,
    student: &mut MlpDenoiser,
    setup: &DistillSetup,
    data: &[TrainSample],
    cfg: &TrainConfig,
    stage1_initialised: bool,
    rng: &RandomSource,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training data is empty"));
    }
    if !stage1_initialised {
        warn!("distribution matching without a consistency-distilled initialisation");
    }
    let stage = StageKind::Stage2;
    let lr = cfg.lr_gen_stage2 * cfg.lr_scale;
    let lr_fake = cfg.lr_fake_stage2 * cfg.lr_scale;
    let mut opt_draft = cfg.optimizer.state(draft.num_params());
    let mut opt_student = cfg.optimizer.state(student.num_params());
    let mut fake_head = GaussianHead::zeros(draft.dim());
    let mut opt_fake = cfg.optimizer.state(fake_head.num_params());
    let anchor = data
        .get(setup.anchor)
        .ok_or_else(|| invalid("anchor index outside the dataset"))?;
    let gen_t = setup.gen_time();
    let mut log = TrainLog {
        stage,
        rows: Vec::new(),
    };

    for epoch in 0..cfg.epochs_stage2 {
        let global = cfg.epochs_stage1 + epoch;
        let alpha = cfg.alpha_at(global)?;
        let mut run = Running::new();
        let shuffle = rng.substream_at("shuffle", &[2, epoch as u64]);
        for (bi, chunk) in batches(data.len(), cfg.batch, shuffle).iter().enumerate() {
            let bs = chunk.len() as f64;
            let w_dist = (1.0 - alpha) / bs;
            let mut g_draft = draft.zero_grads();
            let mut g_student = student.zero_grads();
            let mut g_fake = HeadGrads::zeros(draft.dim());
            let (mut reg, mut ent, mut dist) = (0.0, 0.0, 0.0);
            let noise = |j: usize| rng.substream_at("dmd", &[epoch as u64, bi as u64, j as u64]);

            let mut terms: Vec<ArTerms> = chunk
                .iter()
                .map(|&idx| ar_terms(draft, &data[idx], cfg, alpha / bs))
                .collect::<Result<_>>()?;
            for t in &terms {
                reg += t.reg / bs;
                ent += t.entropy / bs;
            }

            match cfg.dmd_mode {
                DmdMode::Analytic => {
                    let (out_a, trace_a) = draft.forward_traced(&anchor.ctx, &anchor.condition)?;
                    let z = out_a.feature;
                    let real = setup.data_dist(&anchor.teacher_z)?;
                    let mut gens = Vec::with_capacity(chunk.len());
                    for j in 0..chunk.len() {
                        let eps = noise(j).normal_vec(student.dim());
                        gens.push(student.forward(&eps, gen_t, &z, &setup.sched)?);
                    }
                    let xs: Vec<Vec<f64>> = gens.iter().map(|(x, _)| x.clone()).collect();
                    let fake = batch_moments(&xs)?;
                    dist = gaussian_kl(&fake, &real)?;
                    let mut dz_sum = vec![0.0; z.len()];
                    for (j, (x, trace)) in gens.iter().enumerate() {
                        let mut r = noise(j).substream("level");
                        let g = dmd_at_noise(x, &real, &fake, setup, cfg, &mut r)?;
                        let d_out: Vec<f64> = g.iter().map(|v| v * w_dist).collect();
                        let (_, dz) = student.backward(trace, &d_out, &mut g_student);
                        dz_sum.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
                    }
                    if cfg.dist_into_draft {
                        let seeds = BackwardSeeds {
                            d_feature: Some(dz_sum),
                            ..Default::default()
                        };
                        g_draft.add_scaled(&draft.backward(&trace_a, &seeds)?, 1.0);
                    }
                }
                DmdMode::Learned => {
                    for (j, (t, &idx)) in terms.iter_mut().zip(chunk).enumerate() {
                        let s = &data[idx];
                        let z = t.out.feature.clone();
                        let eps = noise(j).normal_vec(student.dim());
                        let (x, trace) = student.forward(&eps, gen_t, &z, &setup.sched)?;
                        let real = setup.data_dist(&s.teacher_z)?;
                        let fake = fake_head.apply(&z)?;
                        dist += gaussian_kl(&fake, &real)? / bs;
                        let mut r = noise(j).substream("level");
                        let g = dmd_at_noise(&x, &real, &fake, setup, cfg, &mut r)?;
                        let d_out: Vec<f64> = g.iter().map(|v| v * w_dist).collect();
                        let (_, dz) = student.backward(&trace, &d_out, &mut g_student);
                        if cfg.dist_into_draft {
                            add_feature_grad(&mut t.seeds, &dz, 1.0);
                        }
                        // fake branch: Gaussian NLL of the detached sample
                        let d_mean: Vec<f64> = x
                            .iter()
                            .zip(fake.mean().iter().zip(fake.var()))
                            .map(|(x, (m, v))| -(x - m) / v / bs)
                            .collect();
                        let d_logvar: Vec<f64> = x
                            .iter()
                            .zip(fake.mean().iter().zip(fake.var()))
                            .map(|(x, (m, v))| 0.5 * (1.0 - (x - m).powi(2) / v) / bs)
                            .collect();
                        fake_head.backward(&z, Some(&d_mean), Some(&d_logvar), &mut g_fake);
                    }
                }
            }
            for t in &terms {
                g_draft.add_scaled(&draft.backward(&t.trace, &t.seeds)?, 1.0);
            }

            let b = total_loss(reg, ent, dist, alpha);
            check_loss(stage, global, &b, cfg.divergence_limit)?;
            let (gd, gs) = (g_draft.flatten(), g_student.flatten());
            run.push(&b, (norm2(&gd) + norm2(&gs)).sqrt());
            step(
                draft,
                &mut opt_draft,
                gd,
                lr,
                cfg.grad_clip,
                stage,
                global,
                "draft",
            )?;
            step(
                student,
                &mut opt_student,
                gs,
                lr,
                cfg.grad_clip,
                stage,
                global,
                "student",
            )?;
            if cfg.dmd_mode == DmdMode::Learned {
                step(
                    &mut fake_head,
                    &mut opt_fake,
                    g_fake.flatten(),
                    lr_fake,
                    cfg.grad_clip,
                    stage,
                    global,
                    "fake",
                )?;
            }
        }
        let row = run.row(global, alpha);
        info!(
            "stage2 epoch {global}: alpha {:.3} reg {:.5} entropy {:.5} dmd {:.5} total {:.5}",
            row.alpha, row.reg, row.entropy, row.dist, row.total
        );
        log.rows.push(row);
    }
    Ok(log)
}

#[allow(dead_code)]
fn _assert_grads_types(_: &ModelGrads, _: &MlpGrads) {}
