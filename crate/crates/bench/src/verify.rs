//! Invariant and oracle checks behind `cspd verify`, and the finite-difference
//! gradient probes shared with the acceptance suite.

use cspd_core::entropy::{calibrate_threshold, entropy_loss, EntropyStats, ThresholdConfig};
use cspd_core::latent::AttentionMap;
use cspd_core::models::{BackwardSeeds, Denoiser, DiffusionHead, InitScales, MlpDenoiser, Params};
use cspd_core::train::{
    alpha_schedule, cd_loss_grad, cd_loss_with, cd_points, dmd_grad, entropy_term, gaussian_score,
    grad_check, ode_step_span, reg_loss_grad, CdConfig, CdSample, TrainConfig,
};
use cspd_core::{GaussianParams, LatentToken, NoiseSchedule, RandomSource, ToyARModel};
use ndarray::Array2;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::ExperimentConfig;
use crate::harness::benchmark;
use crate::oracles::{expected_acceptance_oracle, ks_statistic};
use crate::report::{rows_to_csv, Assertion};

fn toy(rng: &RandomSource, name: &str, dim: usize, depth: usize) -> cspd_core::Result<ToyARModel> {
    ToyARModel::random(
        dim,
        depth,
        2,
        &InitScales::default(),
        &mut rng.substream(name),
    )
}

fn context(rng: &mut RandomSource, len: usize, dim: usize) -> cspd_core::Result<Vec<LatentToken>> {
    (0..len)
        .map(|_| LatentToken::new(rng.normal_vec(dim)))
        .collect()
}

/// Relative finite-difference error of the feature-regression gradient with
/// respect to every draft weight.
pub fn reg_grad_error(seed: u64) -> cspd_core::Result<f64> {
    let rng = RandomSource::new(seed);
    let draft = toy(&rng, "draft", 3, 2)?;
    let mut r = rng.substream("ctx");
    let ctx = context(&mut r, 5, 3)?;
    let cond = LatentToken::new(r.normal_vec(3))?;
    let target_feature = r.normal_vec(3);
    let beta = 0.5;
    let (out, trace) = draft.forward_traced(&ctx, &cond)?;
    let seeds = BackwardSeeds {
        d_feature: Some(reg_loss_grad(&out.feature, &target_feature, beta)?),
        ..Default::default()
    };
    let grad = draft.backward(&trace, &seeds)?.flatten();
    let loss = |p: &[f64]| {
        let mut m = draft.clone();
        m.assign(p)?;
        let f = m.forward_traced(&ctx, &cond)?.0.feature;
        cspd_core::latent::smooth_l1(&f, &target_feature, beta)
    };
    grad_check(loss, &grad, &draft.flatten())
}

/// Same check for the layer-averaged entropy loss.
pub fn entropy_grad_error(seed: u64) -> cspd_core::Result<f64> {
    let rng = RandomSource::new(seed);
    let draft = toy(&rng, "draft", 3, 3)?;
    let mut r = rng.substream("ctx");
    let ctx = context(&mut r, 6, 3)?;
    let cond = LatentToken::new(r.normal_vec(3))?;
    let (out, trace) = draft.forward_traced(&ctx, &cond)?;
    let (_, d_attn) = entropy_term(&out)?;
    let seeds = BackwardSeeds {
        d_attn,
        ..Default::default()
    };
    let grad = draft.backward(&trace, &seeds)?.flatten();
    let loss = |p: &[f64]| {
        let mut m = draft.clone();
        m.assign(p)?;
        Ok(entropy_term(&m.forward_traced(&ctx, &cond)?.0)?.0)
    };
    grad_check(loss, &grad, &draft.flatten())
}

/// Entropy loss of one head's softmax maps against random logits, probing
/// the logits directly; `size` is the context length.
pub fn entropy_logit_grad_error(seed: u64, size: usize) -> cspd_core::Result<f64> {
    let mut rng = RandomSource::new(seed);
    let logits: Vec<f64> = (0..size * size).map(|_| 2.0 * rng.normal()).collect();
    let maps = |l: &[f64]| -> cspd_core::Result<AttentionMap> {
        let a = Array2::from_shape_vec((size, size), l.to_vec())
            .map_err(|e| cspd_core::Error::InvalidArgument(e.to_string()))?;
        cspd_core::latent::softmax_rows(&a)
    };
    let map = maps(&logits)?;
    let d_a = cspd_core::entropy::entropy_loss_grad(std::slice::from_ref(&map))?;
    let a = map.probs();
    let g = &d_a[0];
    let mut grad = Vec::with_capacity(size * size);
    for r in 0..size {
        let dot: f64 = (0..size).map(|c| a[[r, c]] * g[[r, c]]).sum();
        grad.extend((0..size).map(|c| a[[r, c]] * (g[[r, c]] - dot)));
    }
    grad_check(|l| entropy_loss(&[maps(l)?]), &grad, &logits)
}

/// Consistency loss with the teacher-side branch frozen, probing all
/// student weights.
pub fn cd_grad_error(seed: u64) -> cspd_core::Result<f64> {
    let rng = RandomSource::new(seed);
    let sched = NoiseSchedule::default_linear(100)?;
    let teacher = DiffusionHead::teacher(Denoiser::Fixed {
        mean: vec![0.3, -0.2],
        var: vec![0.5, 1.2],
    });
    let student = MlpDenoiser::random(2, 2, 8, &mut rng.substream("student"))?;
    let mut r = rng.substream("data");
    let samples: Vec<CdSample> = (0..6)
        .map(|_| CdSample {
            x0: r.normal_vec(2),
            z: r.normal_vec(2),
            teacher_z: vec![],
        })
        .collect();
    let cfg = CdConfig {
        span: 10.0,
        substeps: 3,
    };
    let points = cd_points(&teacher, &samples, &sched, &cfg, &rng.substream("cd"))?;
    let (_, grads, _) = cd_loss_grad(&student, &points, &sched)?;
    let frozen: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            student
                .forward(&p.x_prev, p.t_prev, &p.z, &sched)
                .map(|(y, _)| y)
        })
        .collect::<cspd_core::Result<_>>()?;
    let loss = |p: &[f64]| {
        let mut net = student.clone();
        net.assign(p)?;
        let mut total = 0.0;
        for (pt, b) in points.iter().zip(&frozen) {
            let (a, _) = net.forward(&pt.x_t, pt.t, &pt.z, &sched)?;
            total += a.iter().zip(b).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / points.len() as f64)
    };
    let at_start = loss(&student.flatten())?;
    let reference = cd_loss_with(
        |x, t, z| student.forward(x, t, z, &sched).map(|(y, _)| y),
        &points,
    )?;
    if (at_start - reference).abs() > 1e-12 * reference.abs().max(1.0) {
        return Ok(f64::INFINITY);
    }
    grad_check(loss, &grads.flatten(), &student.flatten())
}

/// The analytic-mode generator field `s_fake − s_real` against central
/// differences of `log p_fake − log p_real`, worst over `points` samples.
pub fn dmd_field_error(seed: u64, points: usize) -> cspd_core::Result<f64> {
    let mut rng = RandomSource::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let d = 3;
        let real = GaussianParams::new(
            rng.normal_vec(d),
            (0..d).map(|_| 0.2 + rng.uniform()).collect(),
        )?;
        let fake = GaussianParams::new(
            rng.normal_vec(d),
            (0..d).map(|_| 0.2 + rng.uniform()).collect(),
        )?;
        let x = rng.normal_vec(d);
        let field = dmd_grad(
            std::slice::from_ref(&x),
            |x| Ok(gaussian_score(x, real.mean(), real.var())),
            |x| Ok(gaussian_score(x, fake.mean(), fake.var())),
        )?;
        let phi = |x: &[f64]| Ok(fake.log_density(x)? - real.log_density(x)?);
        worst = worst.max(grad_check(phi, &field[0], &x)?);
    }
    Ok(worst)
}

/// Exact probability-flow map of `N(m, s2)` data from `ᾱ_t` to `ᾱ_0`.
pub fn gaussian_flow(x_t: f64, ab_t: f64, ab_0: f64, m: f64, s2: f64) -> f64 {
    let std_t = (ab_t * s2 + 1.0 - ab_t).sqrt();
    let std_0 = (ab_0 * s2 + 1.0 - ab_0).sqrt();
    ab_0.sqrt() * m + std_0 * (x_t - ab_t.sqrt() * m) / std_t
}

/// Largest endpoint error of Euler integration from `t = T` to `0` over a
/// few starting points, with `substeps` Euler steps per schedule step.
pub fn ode_endpoint_error(
    steps: usize,
    substeps: usize,
    m: f64,
    s2: f64,
) -> cspd_core::Result<f64> {
    let sched = NoiseSchedule::default_linear(steps)?;
    let teacher = DiffusionHead::teacher(Denoiser::Fixed {
        mean: vec![m],
        var: vec![s2],
    });
    let total = steps as f64;
    let mut worst: f64 = 0.0;
    for x in [-2.0, -0.7, 0.0, 0.4, 1.9] {
        let end = ode_step_span(&teacher, &[x], total, total, steps * substeps, &[], &sched)?[0];
        worst = worst.max((end - gaussian_flow(x, sched.alpha_bar(steps), 1.0, m, s2)).abs());
    }
    Ok(worst)
}

fn outcome(name: &str, r: anyhow::Result<(bool, String)>) -> Assertion {
    match r {
        Ok((ok, detail)) => Assertion::check(name, ok, detail),
        Err(e) => Assertion::check(name, false, format!("error: {e:#}")),
    }
}

/// Fast invariant and oracle checks; every entry must pass.
pub fn verify_suite() -> Vec<Assertion> {
    let mut out = Vec::new();
    out.push(outcome(
        "oracle-closed-form",
        (|| {
            let normal = Normal::new(0.0, 1.0)?;
            let mut worst: f64 = 0.0;
            for mu in [0.0, 0.25, 0.5, 1.0, 2.0, 5.0] {
                let p = GaussianParams::new(vec![0.0], vec![1.0])?;
                let q = GaussianParams::new(vec![mu], vec![1.0])?;
                worst = worst
                    .max((expected_acceptance_oracle(&p, &q)? - 2.0 * normal.cdf(-mu / 2.0)).abs());
            }
            Ok((worst < 1e-6, format!("max deviation {worst:e}")))
        })(),
    ));
    out.push(outcome(
        "ks-basics",
        (|| {
            let mut rng = RandomSource::new(5);
            let a: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.normal()]).collect();
            let b: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.normal() + 1.0]).collect();
            let same = ks_statistic(&a, &a)?;
            let shifted = ks_statistic(&a, &b)?;
            Ok((
                same == 0.0 && shifted > 0.3,
                format!("self {same}, shifted {shifted:.4}"),
            ))
        })(),
    ));
    out.push(outcome(
        "entropy-exactness",
        (|| {
            let mut ok = true;
            for r in 1..=64 {
                ok &= entropy_loss(&[AttentionMap::uniform(r)])? == -(r as f64).ln();
                let one_hot =
                    Array2::from_shape_fn(
                        (r, r),
                        |(i, j)| if (i * 7 + 3) % r == j { 1.0 } else { 0.0 },
                    );
                ok &= entropy_loss(&[AttentionMap::new(one_hot)?])? == 0.0;
            }
            Ok((
                ok,
                "uniform maps give -ln R and one-hot maps 0 for R = 1..64".into(),
            ))
        })(),
    ));
    out.push(outcome(
        "schedule-and-threshold",
        (|| {
            let cfg = TrainConfig::default();
            let total = cfg.total() as f64;
            let a0 = alpha_schedule(0.0, &cfg)?;
            let a1 = alpha_schedule(total, &cfg)?;
            let mid = alpha_schedule(total / 2.0, &cfg)?;
            let stats = EntropyStats::new(1.7, 0.4, 100, 0)?;
            let tau = calibrate_threshold(&stats, &ThresholdConfig::default());
            let ok = (a0 - 0.95).abs() <= 1e-12
                && (a1 - 0.05).abs() <= 1e-12
                && (mid - 0.5).abs() <= 1e-12
                && (tau - (0.3 * 1.7 - 0.1 * 0.4)).abs() <= 1e-12;
            Ok((ok, format!("alpha {a0} / {mid} / {a1}, tau {tau}")))
        })(),
    ));
    out.push(outcome(
        "gradients",
        (|| {
            let errs = [
                ("reg", reg_grad_error(1)?),
                ("entropy", entropy_grad_error(2)?),
                ("cd", cd_grad_error(3)?),
                ("dmd", dmd_field_error(4, 20)?),
            ];
            let ok = errs.iter().all(|(_, e)| *e < 1e-4);
            Ok((ok, format!("{errs:?}")))
        })(),
    ));
    out.push(outcome("ode-flow", (|| {
        let standard = ode_endpoint_error(64, 1, 0.0, 1.0)?;
        let coarse = ode_endpoint_error(64, 1, 0.4, 0.25)?;
        let fine = ode_endpoint_error(64, 2, 0.4, 0.25)?;
        Ok((
            standard < 1e-3 && fine < coarse,
            format!("standard-normal error {standard:e}; N(0.4, 0.25) error {coarse:.2e} -> {fine:.2e}"),
        ))
    })()));
    out.push(outcome(
        "analytic-benchmark",
        (|| {
            let mut cfg = ExperimentConfig::analytic_task(0.5);
            cfg.trials = 300;
            let a = benchmark(&cfg)?;
            let b = benchmark(&cfg)?;
            let failed: Vec<String> = a
                .assertions
                .iter()
                .filter(|x| x.passed == Some(false))
                .map(Assertion::line)
                .collect();
            let same = rows_to_csv(&a.rows)? == rows_to_csv(&b.rows)?;
            Ok((
                failed.is_empty() && same,
                format!("embedded failures {failed:?}; repeat identical: {same}"),
            ))
        })(),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for a in verify_suite() {
            assert_eq!(a.passed, Some(true), "{}", a.line());
        }
    }

    #[test]
    fn flow_oracle_fixes_standard_normal() {
        for x in [-1.0, 0.0, 2.5] {
            assert_eq!(gaussian_flow(x, 0.3, 1.0, 0.0, 1.0), x);
        }
    }
}
