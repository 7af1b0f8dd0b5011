use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::entropy::{entropy_loss, entropy_loss_grad};
use crate::error::{check_dim, invalid, Error, Result};
use crate::latent::{
    forward_diffuse_with, smooth_l1, smooth_l1_grad, GaussianParams, LatentToken, NoiseSchedule,
    RandomSource,
};
use crate::models::{DiffusionHead, MlpDenoiser, MlpGrads, ModelOutput};

/// Smooth-L1 feature regression of the draft onto the target.
pub fn reg_loss(draft_out: &ModelOutput, target_out: &ModelOutput, beta: f64) -> Result<f64> {
    smooth_l1(&draft_out.feature, &target_out.feature, beta)
}

/// `d reg / d draft_feature`.
pub fn reg_loss_grad(draft_feature: &[f64], target_feature: &[f64], beta: f64) -> Result<Vec<f64>> {
    smooth_l1_grad(draft_feature, target_feature, beta)
}

/// Entropy loss averaged over all layers, with `dL/dA` seeds per layer.
pub fn entropy_term(out: &ModelOutput) -> Result<(f64, Vec<(usize, Vec<Array2<f64>>)>)> {
    let layers = out.attn.len();
    if layers == 0 {
        return Err(invalid("model output has no attention layers"));
    }
    let scale = 1.0 / layers as f64;
    let mut value = 0.0;
    let mut seeds = Vec::with_capacity(layers);
    for (l, maps) in out.attn.iter().enumerate() {
        value += entropy_loss(maps)? * scale;
        let mut g = entropy_loss_grad(maps)?;
        g.iter_mut().for_each(|m| m.mapv_inplace(|v| v * scale));
        seeds.push((l, g));
    }
    Ok((value, seeds))
}

/// Backward Euler step of the probability-flow ODE from `t` to `t − h`:
/// `x + ½·h·β(t)·(x + score)`.
pub fn pf_ode_euler(
    x: &[f64],
    t: f64,
    h: f64,
    score: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim(x.len(), score.len())?;
    if !(h > 0.0 && t - h >= -1e-12) {
        return Err(Error::StepOutOfRange {
            t: t - h,
            max: sched.steps(),
        });
    }
    let rate = sched.beta_rate_at(t)?;
    Ok(x.iter()
        .zip(score)
        .map(|(x, s)| x + 0.5 * h * rate * (x + s))
        .collect())
}

/// One unit ODE step `x_t → x_{t−1}` using the teacher's score.
pub fn ode_step(
    teacher: &DiffusionHead,
    x_t: &LatentToken,
    t: usize,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<LatentToken> {
    if t == 0 || t > sched.steps() {
        return Err(Error::StepOutOfRange {
            t: t as f64,
            max: sched.steps(),
        });
    }
    let x = ode_step_span(teacher, x_t.as_slice(), t as f64, 1.0, 1, z, sched)?;
    LatentToken::new(x)
}

/// Integrate the ODE from `t` down to `t − span` with `substeps` Euler steps.
pub fn ode_step_span(
    teacher: &DiffusionHead,
    x: &[f64],
    t: f64,
    span: f64,
    substeps: usize,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if substeps == 0 {
        return Err(invalid("substeps must be >= 1"));
    }
    let h = span / substeps as f64;
    let mut x = x.to_vec();
    for k in 0..substeps {
        let tk = t - k as f64 * h;
        let score = teacher.score(&x, tk, z, sched)?;
        x = pf_ode_euler(&x, tk, h, &score, sched)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdConfig {
    /// Gap, in schedule steps, between the two points compared.
    pub span: f64,
    /// Euler steps the teacher takes across one span.
    pub substeps: usize,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            span: 20.0,
            substeps: 4,
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.span > 0.0 && self.span.is_finite()) {
            return Err(invalid("cd span must be positive"));
        }
        if self.substeps == 0 {
            return Err(invalid("cd substeps must be >= 1"));
        }
        Ok(())
    }
}

/// One training example for consistency distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct CdSample {
    pub x0: Vec<f64>,
    /// Student condition.
    pub z: Vec<f64>,
    /// Teacher condition.
    pub teacher_z: Vec<f64>,
}

/// Pair of adjacent trajectory points; `x_prev` comes from the teacher ODE.
#[derive(Clone, Debug, PartialEq)]
pub struct CdPoint {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub x_prev: Vec<f64>,
    pub t_prev: f64,
    pub z: Vec<f64>,
}

/// Draw a continuous time `t ∈ [span, T]` per sample, diffuse `x0` to it and
/// run the teacher back by `span`.
pub fn cd_points(
    teacher: &DiffusionHead,
    samples: &[CdSample],
    sched: &NoiseSchedule,
    cfg: &CdConfig,
    rng: &RandomSource,
) -> Result<Vec<CdPoint>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(invalid("consistency batch is empty"));
    }
    let total = sched.steps() as f64;
    if cfg.span > total {
        return Err(invalid("cd span exceeds the schedule length"));
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng.substream_at("cd", &[i as u64]);
            let t = cfg.span + r.uniform() * (total - cfg.span);
            let eps = r.normal_vec(s.x0.len());
            let x_t = forward_diffuse_with(&s.x0, sched.alpha_bar_at(t)?, &eps)?;
            let x_prev = ode_step_span(
                teacher,
                &x_t,
                t,
                cfg.span,
                cfg.substeps,
                &s.teacher_z,
                sched,
            )?;
            Ok(CdPoint {
                x_t,
                t,
                x_prev,
                t_prev: (t - cfg.span).max(0.0),
                z: s.z.clone(),
            })
        })
        .collect()
}

/// `mean ‖f(x_t, t) − f(x_prev, t_prev)‖²` for any student `f(x, t, z)`.
pub fn cd_loss_with<F>(student: F, points: &[CdPoint]) -> Result<f64>
where
    F: Fn(&[f64], f64, &[f64]) -> Result<Vec<f64>>,
{
    if points.is_empty() {
        return Err(invalid("consistency batch is empty"));
    }
    let mut total = 0.0;
    for p in points {
        let a = student(&p.x_t, p.t, &p.z)?;
        let b = student(&p.x_prev, p.t_prev, &p.z)?;
        total += a.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / points.len() as f64)
}

pub fn cd_loss(
    student: &DiffusionHead,
    teacher: &DiffusionHead,
    samples: &[CdSample],
    sched: &NoiseSchedule,
    cfg: &CdConfig,
    rng: &RandomSource,
) -> Result<f64> {
    let points = cd_points(teacher, samples, sched, cfg, rng)?;
    cd_loss_with(|x, t, z| student.predict_x0(x, t, z, sched), &points)
}

/// Consistency loss, its parameter gradient, and `dL/dz` per point. The
/// `x_prev` branch is a constant.
pub fn cd_loss_grad(
    net: &MlpDenoiser,
    points: &[CdPoint],
    sched: &NoiseSchedule,
) -> Result<(f64, MlpGrads, Vec<Vec<f64>>)> {
    if points.is_empty() {
        return Err(invalid("consistency batch is empty"));
    }
    let n = points.len() as f64;
    let mut grads = net.zero_grads();
    let mut dzs = Vec::with_capacity(points.len());
    let mut total = 0.0;
    for p in points {
        let (a, trace) = net.forward(&p.x_t, p.t, &p.z, sched)?;
        let (b, _) = net.forward(&p.x_prev, p.t_prev, &p.z, sched)?;
        let diff: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a - b).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>();
        let d_out: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
        let (_, dz) = net.backward(&trace, &d_out, &mut grads);
        dzs.push(dz);
    }
    Ok((total / n, grads, dzs))
}

/// `∇ log N(x; mean, var)` for a diagonal Gaussian.
pub fn gaussian_score(x: &[f64], mean: &[f64], var: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -(x - m) / v)
        .collect()
}

/// Generator-output gradient `−(s_real(x) − s_fake(x))` per sample.
pub fn dmd_grad<R, F>(xs: &[Vec<f64>], real_score: R, fake_score: F) -> Result<Vec<Vec<f64>>>
where
    R: Fn(&[f64]) -> Result<Vec<f64>>,
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    xs.iter()
        .map(|x| {
            let real = real_score(x)?;
            let fake = fake_score(x)?;
            check_dim(real.len(), fake.len())?;
            let g: Vec<f64> = real.iter().zip(&fake).map(|(r, f)| -(r - f)).collect();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("score difference"));
            }
            Ok(g)
        })
        .collect()
}

/// `KL(fake ‖ real)` between diagonal Gaussians.
pub fn gaussian_kl(fake: &GaussianParams, real: &GaussianParams) -> Result<f64> {
    check_dim(real.dim(), fake.dim())?;
    Ok(fake
        .mean()
        .iter()
        .zip(fake.var())
        .zip(real.mean().iter().zip(real.var()))
        .map(|((mf, vf), (mr, vr))| 0.5 * (vf / vr + (mr - mf).powi(2) / vr - 1.0 + (vr / vf).ln()))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Denoiser;

    fn fixed(mean: f64, var: f64) -> DiffusionHead {
        DiffusionHead::teacher(Denoiser::Fixed {
            mean: vec![mean],
            var: vec![var],
        })
    }

    /// Standardised value is conserved by the exact flow for `N(m, s²)` data.
    fn closed_form_flow(x_t: f64, ab_t: f64, ab_0: f64, m: f64, s2: f64) -> f64 {
        let std_t = (ab_t * s2 + 1.0 - ab_t).sqrt();
        let std_0 = (ab_0 * s2 + 1.0 - ab_0).sqrt();
        ab_0.sqrt() * m + std_0 * (x_t - ab_t.sqrt() * m) / std_t
    }

    fn integrate(teacher: &DiffusionHead, x: f64, sched: &NoiseSchedule, sub: usize) -> f64 {
        let total = sched.steps() as f64;
        ode_step_span(teacher, &[x], total, total, sched.steps() * sub, &[], sched).unwrap()[0]
    }

    #[test]
    fn reg_examples() {
        let out = |f: Vec<f64>| ModelOutput {
            feature: f,
            attn: vec![],
            next_dist: GaussianParams::new(vec![0.0], vec![1.0]).unwrap(),
        };
        let a = out(vec![0.5, 1.0, -2.0, 0.0]);
        assert_eq!(reg_loss(&a, &a, 1.0).unwrap(), 0.0);
        let b = out(vec![2.5, 1.0, -2.0, 0.0]);
        assert_eq!(reg_loss(&b, &a, 1.0).unwrap(), 1.5 / 4.0);
        assert!(reg_loss(&out(vec![1.0]), &a, 1.0).is_err());
    }

    #[test]
    fn standard_normal_flow_is_identity() {
        let sched = NoiseSchedule::default_linear(64).unwrap();
        let teacher = fixed(0.0, 1.0);
        for x in [-2.0, -0.3, 0.0, 1.7] {
            let end = integrate(&teacher, x, &sched, 1);
            assert!((end - x).abs() < 1e-3);
            assert!((end - closed_form_flow(x, sched.alpha_bar(64), 1.0, 0.0, 1.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn euler_error_is_first_order() {
        let sched = NoiseSchedule::linear(64, 1e-3, 0.2).unwrap();
        let (m, s2) = (0.6, 0.09);
        let teacher = fixed(m, s2);
        let x = 1.3;
        let exact = closed_form_flow(x, sched.alpha_bar(64), 1.0, m, s2);
        let errs: Vec<f64> = [1, 2, 4]
            .iter()
            .map(|&sub| (integrate(&teacher, x, &sched, sub) - exact).abs())
            .collect();
        assert!(errs[0] < 5e-2, "{errs:?}");
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..2.5).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn non_standard_data_flow_converges() {
        let sched = NoiseSchedule::default_linear(64).unwrap();
        let (m, s2) = (0.4, 0.25);
        let teacher = fixed(m, s2);
        for x in [-1.5, 0.2, 2.0] {
            let exact = closed_form_flow(x, sched.alpha_bar(64), 1.0, m, s2);
            let coarse = (integrate(&teacher, x, &sched, 1) - exact).abs();
            let fine = (integrate(&teacher, x, &sched, 2) - exact).abs();
            assert!(
                coarse < 1e-2 && (1.8..2.2).contains(&(coarse / fine)),
                "{coarse} {fine}"
            );
        }
    }

    #[test]
    fn zero_score_is_drift_only() {
        let sched = NoiseSchedule::default_linear(10).unwrap();
        let x = [0.8, -0.4];
        let out = pf_ode_euler(&x, 5.0, 1.0, &[0.0, 0.0], &sched).unwrap();
        let rate = -(1.0 - sched.betas()[4]).ln();
        for k in 0..2 {
            assert!((out[k] - x[k] * (1.0 + 0.5 * rate)).abs() < 1e-15);
        }
        assert!(ode_step(
            &fixed(0.0, 1.0),
            &LatentToken::new(vec![0.1]).unwrap(),
            0,
            &[],
            &sched
        )
        .is_err());
        assert!(ode_step(
            &fixed(0.0, 1.0),
            &LatentToken::new(vec![0.1]).unwrap(),
            11,
            &[],
            &sched
        )
        .is_err());
    }

    #[test]
    fn cd_examples() {
        let sched = NoiseSchedule::default_linear(100).unwrap();
        let teacher = fixed(0.5, 0.2);
        let samples: Vec<CdSample> = (0..6)
            .map(|i| CdSample {
                x0: vec![0.1 * i as f64],
                z: vec![],
                teacher_z: vec![],
            })
            .collect();
        let cfg = CdConfig {
            span: 5.0,
            substeps: 2,
        };
        let points = cd_points(&teacher, &samples, &sched, &cfg, &RandomSource::new(1)).unwrap();
        let constant = cd_loss_with(|_, _, _| Ok(vec![0.7]), &points).unwrap();
        assert_eq!(constant, 0.0);
        let identity = cd_loss_with(|x, _, _| Ok(x.to_vec()), &points).unwrap();
        let deltas = points
            .iter()
            .map(|p| (p.x_t[0] - p.x_prev[0]).powi(2))
            .sum::<f64>()
            / 6.0;
        assert!((identity - deltas).abs() < 1e-15);
        assert!(points
            .iter()
            .all(|p| p.t >= 5.0 && p.t <= 100.0 && (p.t - p.t_prev - 5.0).abs() < 1e-12));
        assert!(cd_points(&teacher, &[], &sched, &cfg, &RandomSource::new(1)).is_err());
    }

    #[test]
    fn cd_two_parameter_gradient() {
        // student f(x) = a·x + b with the x_prev branch frozen at (a0, b0)
        let sched = NoiseSchedule::default_linear(100).unwrap();
        let teacher = fixed(-0.3, 0.5);
        let samples: Vec<CdSample> = (0..8)
            .map(|i| CdSample {
                x0: vec![0.2 * i as f64 - 0.5],
                z: vec![],
                teacher_z: vec![],
            })
            .collect();
        let points = cd_points(
            &teacher,
            &samples,
            &sched,
            &CdConfig::default(),
            &RandomSource::new(2),
        )
        .unwrap();
        let (a0, b0) = (0.7, -0.2);
        let n = points.len() as f64;
        let loss = |a: f64, b: f64| {
            points
                .iter()
                .map(|p| (a * p.x_t[0] + b - (a0 * p.x_prev[0] + b0)).powi(2))
                .sum::<f64>()
                / n
        };
        let (mut ga, mut gb) = (0.0, 0.0);
        for p in &points {
            let r = a0 * p.x_t[0] + b0 - (a0 * p.x_prev[0] + b0);
            ga += 2.0 * r * p.x_t[0] / n;
            gb += 2.0 * r / n;
        }
        let h = 1e-5;
        let fa = (loss(a0 + h, b0) - loss(a0 - h, b0)) / (2.0 * h);
        let fb = (loss(a0, b0 + h) - loss(a0, b0 - h)) / (2.0 * h);
        assert!((fa - ga).abs() < 1e-4 * ga.abs().max(1e-6), "{fa} {ga}");
        assert!((fb - gb).abs() < 1e-4 * gb.abs().max(1e-6), "{fb} {gb}");
        assert_eq!(
            loss(a0, b0),
            cd_loss_with(|x, _, _| Ok(vec![a0 * x[0] + b0]), &points).unwrap()
        );
    }

    #[test]
    fn dmd_examples() {
        let x = vec![vec![0.5]];
        let real = |x: &[f64]| Ok(gaussian_score(x, &[0.0], &[1.0]));
        let fake = |x: &[f64]| Ok(gaussian_score(x, &[1.0], &[1.0]));
        assert_eq!(dmd_grad(&x, real, fake).unwrap(), vec![vec![1.0]]);
        let same = dmd_grad(&[vec![0.3], vec![-2.0]], real, real).unwrap();
        assert!(same.iter().all(|g| g[0] == 0.0));
        let bad = |_: &[f64]| Ok(vec![f64::NAN]);
        assert!(dmd_grad(&x, real, bad).is_err());
    }

    #[test]
    fn dmd_field_integrates_to_log_ratio() {
        // trapezoid integral of the field from x = −4 equals
        // log p_fake − log p_real up to the value at the left end
        let (real, fake) = (
            GaussianParams::new(vec![0.2], vec![0.8]).unwrap(),
            GaussianParams::new(vec![-0.5], vec![1.4]).unwrap(),
        );
        let n = 20_000;
        let (lo, hi) = (-4.0, 4.0);
        let h = (hi - lo) / n as f64;
        let xs: Vec<Vec<f64>> = (0..=n).map(|i| vec![lo + i as f64 * h]).collect();
        let g = dmd_grad(
            &xs,
            |x| Ok(gaussian_score(x, real.mean(), real.var())),
            |x| Ok(gaussian_score(x, fake.mean(), fake.var())),
        )
        .unwrap();
        let phi = |x: f64| fake.log_density(&[x]).unwrap() - real.log_density(&[x]).unwrap();
        let mut acc = 0.0;
        let mut worst: f64 = 0.0;
        for i in 1..=n {
            acc += 0.5 * h * (g[i - 1][0] + g[i][0]);
            worst = worst.max((acc - (phi(xs[i][0]) - phi(lo))).abs());
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn kl_is_zero_on_match() {
        let p = GaussianParams::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        assert!(gaussian_kl(&p, &p).unwrap().abs() < 1e-15);
        let q = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        let r = GaussianParams::new(vec![1.0], vec![1.0]).unwrap();
        assert!((gaussian_kl(&q, &r).unwrap() - 0.5).abs() < 1e-15);
    }
}
