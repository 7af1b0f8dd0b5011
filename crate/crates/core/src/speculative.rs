//! Speculative decoding over continuous latent tokens.
//!
//! A round drafts up to `gamma` tokens with the small model, stopping early
//! when the shallow attention-entropy indicator falls below `tau_ent`. The
//! target then scores every draft position, a prefix is accepted by
//! comparing uniforms against `Σ·p/q`, and the first rejected position is
//! replaced by a draw from the residual `max(0, Σp − q)`.
//!
//! Each draft position carries a standardised noise trajectory of `steps`
//! draws, `u_T = ε_T`, `u_{t-1} = √(1-β_t)·u_t + √β_t·ε_t`. With
//! `trajectory_coupling = κ > 0` the emitted token depends on the final
//! value `u_1`, so both models are compared on the conditional
//! `N(m + √v·κ·u_1, v·(1-κ²))`. Sharing `u_1` between draft and target is
//! what keeps those conditionals comparable; at `κ = 0` they reduce to the
//! marginal `N(m, v)`.

use serde::{Deserialize, Serialize};

use crate::entropy::{early_stop_check, entropy_indicator_at};
use crate::error::{check_dim, invalid, Error, Result};
use crate::latent::{sample_gaussian, GaussianParams, LatentToken, NoiseSchedule, RandomSource};
use crate::models::{ArModel, ModelOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecConfig {
    /// Draft tokens per round.
    pub gamma: usize,
    /// Denoising steps per token.
    pub steps: usize,
    pub temperature: f64,
    pub cfg_scale: f64,
    /// Mix conditional and null-condition passes with `cfg_scale`. Off means
    /// the scale is carried but has no effect.
    pub guidance: bool,
    /// Fraction of the sequence pre-filled by the target.
    pub prefix_fraction: f64,
    pub tau_ent: f64,
    pub early_stop: bool,
    pub shallow_layer: usize,
    pub bonus_token: bool,
    pub share_noise: bool,
    pub trajectory_coupling: f64,
    pub ratio_cap: f64,
    pub resample_cap: usize,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            gamma: 4,
            steps: 16,
            temperature: 1.0,
            cfg_scale: 1.75,
            guidance: false,
            prefix_fraction: 0.0,
            tau_ent: 0.0,
            early_stop: true,
            shallow_layer: 0,
            bonus_token: true,
            share_noise: true,
            trajectory_coupling: 0.0,
            ratio_cap: 1e12,
            resample_cap: 10_000,
        }
    }
}

impl SpecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(invalid("gamma must be >= 1"));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(invalid("temperature must be positive and finite"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::NonFinite("cfg_scale"));
        }
        if !(0.0..1.0).contains(&self.prefix_fraction) {
            return Err(invalid("prefix_fraction must lie in [0, 1)"));
        }
        if self.tau_ent.is_nan() {
            return Err(Error::NonFinite("tau_ent"));
        }
        if !(0.0..1.0).contains(&self.trajectory_coupling) {
            return Err(invalid("trajectory_coupling must lie in [0, 1)"));
        }
        if !(self.ratio_cap > 0.0) {
            return Err(invalid("ratio_cap must be positive"));
        }
        if self.resample_cap == 0 {
            return Err(invalid("resample_cap must be >= 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::default_linear(self.steps)
    }

    /// Per-step variances for `t = 2..=steps`; depend only on the schedule
    /// and temperature.
    fn step_vars(&self, sched: &NoiseSchedule, dim: usize) -> Vec<Vec<f64>> {
        let t2 = self.temperature * self.temperature;
        sched.betas()[1..]
            .iter()
            .map(|b| vec![b * t2; dim])
            .collect()
    }
}

/// Draft proposals for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftBatch {
    pub tokens: Vec<LatentToken>,
    /// Tempered next-token distribution `q_i` of each kept token.
    pub dists: Vec<GaussianParams>,
    /// Shallow indicator after appending each kept token.
    pub indicators: Vec<f64>,
    pub stopped_early: bool,
    /// 1-based position whose indicator triggered the stop.
    pub stop_index: Option<usize>,
    /// Final trajectory value `u_1` of each kept token.
    pub trajectories: Vec<Vec<f64>>,
    /// Draft per-step variances, `t = 2..=steps`.
    pub step_vars: Vec<Vec<f64>>,
    /// Forward passes spent by the draft.
    pub draft_calls: usize,
}

impl DraftBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens sampled this round, including one discarded by an early stop.
    pub fn drafted(&self) -> usize {
        self.len() + usize::from(self.stopped_early)
    }

    fn check(&self, gamma: usize) -> Result<()> {
        let n = self.tokens.len();
        if self.dists.len() != n || self.indicators.len() != n || self.trajectories.len() != n {
            return Err(invalid("draft batch fields have mismatched lengths"));
        }
        if n > gamma {
            return Err(invalid(format!(
                "draft batch holds {n} tokens, gamma is {gamma}"
            )));
        }
        Ok(())
    }
}

/// Outcome of the target pass over one draft batch.
#[derive(Clone, Debug, PartialEq)]
pub struct VerificationResult {
    /// Tempered `p_i` for `i = 1..=len+1`.
    pub target_dists: Vec<GaussianParams>,
    pub sigma_factor: f64,
    pub ratios: Vec<f64>,
    pub accepted_n: usize,
    pub resampled: Option<LatentToken>,
    /// Token drawn from `p_{len+1}` after full acceptance. Also used as the
    /// fallback token for an empty batch, whatever the bonus flag says.
    pub bonus: Option<LatentToken>,
    pub resample_iters: usize,
}

/// One JSON-lines trace event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub drafted: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub skipped: usize,
    pub stopped_early: bool,
    pub stop_index: Option<usize>,
    pub sigma: f64,
    pub ratios: Vec<f64>,
    pub resample_iters: usize,
    pub bonus_emitted: bool,
    pub emitted: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rounds: Vec<RoundTrace>,
    /// Tokens emitted, pre-fill included.
    pub tokens: usize,
    pub prefill_tokens: usize,
    pub draft_calls: usize,
    /// Parallel verification passes (one per round).
    pub target_rounds: usize,
    /// Target positions scored, `Σ (len + 1)` over rounds.
    pub target_evals: usize,
    pub early_stops: usize,
    pub resample_iters: usize,
    pub accepted: usize,
    /// Acceptance tests decided: accepted plus one per rejection.
    pub tested: usize,
}

impl RunMetrics {
    pub fn acceptance_rate(&self) -> f64 {
        if self.tested == 0 {
            return f64::NAN;
        }
        self.accepted as f64 / self.tested as f64
    }

    pub fn rejection_rate(&self) -> f64 {
        1.0 - self.acceptance_rate()
    }

    /// Target calls (verification rounds plus pre-fill steps) per token.
    pub fn verifier_calls_per_token(&self) -> f64 {
        (self.target_rounds + self.prefill_tokens) as f64 / self.tokens as f64
    }

    pub fn target_evals_per_token(&self) -> f64 {
        (self.target_evals + self.prefill_tokens) as f64 / self.tokens as f64
    }

    pub fn mean_accepted_run(&self) -> f64 {
        self.accepted as f64 / self.rounds.len().max(1) as f64
    }

    pub fn early_stop_rate(&self) -> f64 {
        self.early_stops as f64 / self.rounds.len().max(1) as f64
    }

    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn merge(&mut self, other: &RunMetrics) {
        let offset = self.rounds.len();
        self.rounds
            .extend(other.rounds.iter().cloned().map(|mut r| {
                r.round += offset;
                r
            }));
        self.tokens += other.tokens;
        self.prefill_tokens += other.prefill_tokens;
        self.draft_calls += other.draft_calls;
        self.target_rounds += other.target_rounds;
        self.target_evals += other.target_evals;
        self.early_stops += other.early_stops;
        self.resample_iters += other.resample_iters;
        self.accepted += other.accepted;
        self.tested += other.tested;
    }
}

/// `∏_t sqrt(det Σ_q,t / det Σ_p,t)` over diagonal per-step covariances.
pub fn sigma_factor(draft_vars: &[Vec<f64>], target_vars: &[Vec<f64>]) -> Result<f64> {
    if draft_vars.len() != target_vars.len() {
        return Err(Error::DimensionMismatch {
            expected: draft_vars.len(),
            got: target_vars.len(),
        });
    }
    let mut log = 0.0;
    for (q, p) in draft_vars.iter().zip(target_vars) {
        check_dim(q.len(), p.len())?;
        for (index, (&a, &b)) in q.iter().zip(p).enumerate() {
            for v in [a, b] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidVariance { index, value: v });
                }
            }
            log += 0.5 * (a.ln() - b.ln());
        }
    }
    Ok(log.exp())
}

/// `sigma·exp(p0 − q0)` in log space, capped at 1e12.
pub fn pdf_ratio(p0: f64, q0: f64, sigma: f64) -> Result<f64> {
    pdf_ratio_capped(p0, q0, sigma, 1e12)
}

pub fn pdf_ratio_capped(p0: f64, q0: f64, sigma: f64, cap: f64) -> Result<f64> {
    if !(p0.is_finite() && q0.is_finite()) {
        return Err(Error::NonFinite("log density"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma must be positive and finite"));
    }
    Ok((sigma.ln() + p0 - q0).exp().min(cap))
}

/// Number of leading ratios accepted: stops at the first `r > ratio`.
pub fn accept_prefix(ratios: &[f64], rng: &mut RandomSource) -> usize {
    for (i, &ratio) in ratios.iter().enumerate() {
        if rng.uniform() > ratio {
            return i;
        }
    }
    ratios.len()
}

/// Draw from the residual `max(0, Σp − q)` by proposing from `p`.
///
/// Returns the token and the number of proposals used.
pub fn resample_rejected(
    p: &GaussianParams,
    q: &GaussianParams,
    sigma: f64,
    rng: &mut RandomSource,
    cap: usize,
) -> Result<(LatentToken, usize)> {
    check_dim(p.dim(), q.dim())?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma must be positive and finite"));
    }
    let log_sigma = sigma.ln();
    for iter in 1..=cap {
        let x = sample_gaussian(p, rng);
        let lp = p.log_density(x.as_slice())?;
        let lq = q.log_density(x.as_slice())?;
        let alpha = (1.0 - (lq - lp - log_sigma).exp()).max(0.0);
        if rng.uniform() < alpha {
            return Ok((x, iter));
        }
    }
    Err(Error::ResampleCapExceeded(cap))
}

/// Model output and tempered (optionally guided) next-token distribution.
pub fn next_params<M: ArModel + ?Sized>(
    model: &M,
    ctx: &[LatentToken],
    condition: &LatentToken,
    cfg: &SpecConfig,
) -> Result<(ModelOutput, GaussianParams)> {
    let out = model.forward(ctx, condition)?;
    let mut params = out.next_dist.clone();
    if cfg.guidance {
        let uncond = model.forward(ctx, &LatentToken::zeros(condition.dim()))?;
        let mean = params
            .mean()
            .iter()
            .zip(uncond.next_dist.mean())
            .map(|(c, u)| u + cfg.cfg_scale * (c - u))
            .collect();
        params = GaussianParams::new(mean, params.var().to_vec())?;
    }
    let params = params.with_var_scaled(cfg.temperature * cfg.temperature)?;
    Ok((out, params))
}

/// Plain autoregressive sampling of `seq_len` tokens from `model` after a
/// zero start token; the reference distribution of [`run_cspd`].
pub fn sample_direct<M: ArModel + ?Sized>(
    model: &M,
    condition: &LatentToken,
    seq_len: usize,
    cfg: &SpecConfig,
    rng: &RandomSource,
) -> Result<Vec<LatentToken>> {
    cfg.validate()?;
    let mut ctx = vec![LatentToken::zeros(model.dim())];
    for k in 0..seq_len {
        let (_, p) = next_params(model, &ctx, condition, cfg)?;
        ctx.push(sample_gaussian(
            &p,
            &mut rng.substream_at("direct", &[k as u64]),
        ));
    }
    ctx.remove(0);
    Ok(ctx)
}

/// Final value `u_1` of the standardised trajectory for one position.
fn trajectory(sched: &NoiseSchedule, dim: usize, rng: &mut RandomSource) -> Vec<f64> {
    let betas = sched.betas();
    let mut u = rng.normal_vec(dim);
    for &b in betas[1..].iter().rev() {
        let (keep, add) = ((1.0 - b).sqrt(), b.sqrt());
        for v in u.iter_mut() {
            *v = keep * *v + add * rng.normal();
        }
    }
    u
}

/// `N(m + √v·κ·u, v·(1-κ²))`.
fn conditional(params: &GaussianParams, u: &[f64], kappa: f64) -> Result<GaussianParams> {
    if kappa == 0.0 {
        return Ok(params.clone());
    }
    let mean = params
        .mean()
        .iter()
        .zip(params.var())
        .zip(u)
        .map(|((m, v), u)| m + v.sqrt() * kappa * u)
        .collect();
    let var = params
        .var()
        .iter()
        .map(|v| v * (1.0 - kappa * kappa))
        .collect();
    GaussianParams::new(mean, var)
}

fn trajectory_stream(rng: &RandomSource, shared: bool, pos: usize) -> RandomSource {
    let name = if shared {
        "trajectory"
    } else {
        "trajectory-target"
    };
    rng.substream_at(name, &[pos as u64])
}

pub fn draft_generate<M: ArModel + ?Sized>(
    draft: &M,
    ctx: &[LatentToken],
    condition: &LatentToken,
    cfg: &SpecConfig,
    rng: &RandomSource,
) -> Result<DraftBatch> {
    draft_generate_n(draft, ctx, condition, cfg, cfg.gamma, rng)
}

/// As [`draft_generate`], drafting at most `limit` tokens.
pub fn draft_generate_n<M: ArModel + ?Sized>(
    draft: &M,
    ctx: &[LatentToken],
    condition: &LatentToken,
    cfg: &SpecConfig,
    limit: usize,
    rng: &RandomSource,
) -> Result<DraftBatch> {
    cfg.validate()?;
    if ctx.is_empty() {
        return Err(invalid("context must contain at least the start token"));
    }
    let sched = cfg.schedule()?;
    let dim = draft.dim();
    let mut seq = ctx.to_vec();
    let mut batch = DraftBatch {
        tokens: Vec::new(),
        dists: Vec::new(),
        indicators: Vec::new(),
        stopped_early: false,
        stop_index: None,
        trajectories: Vec::new(),
        step_vars: cfg.step_vars(&sched, dim),
        draft_calls: 0,
    };
    let (_, mut q) = next_params(draft, &seq, condition, cfg)?;
    batch.draft_calls += 1;
    for i in 1..=limit.min(cfg.gamma) {
        let u = trajectory(&sched, dim, &mut trajectory_stream(rng, true, i));
        let q_cond = conditional(&q, &u, cfg.trajectory_coupling)?;
        let x = sample_gaussian(&q_cond, &mut rng.substream_at("draft-token", &[i as u64]));
        seq.push(x.clone());
        let (out, q_next) = next_params(draft, &seq, condition, cfg)?;
        batch.draft_calls += 1;
        let indicator = entropy_indicator_at(&out, cfg.shallow_layer)?;
        if cfg.early_stop && early_stop_check(indicator, cfg.tau_ent) {
            batch.stopped_early = true;
            batch.stop_index = Some(i);
            break;
        }
        batch.tokens.push(x);
        batch.dists.push(q);
        batch.indicators.push(indicator);
        batch.trajectories.push(u);
        q = q_next;
    }
    Ok(batch)
}

/// Score a draft batch with the target, then accept a prefix and either
/// resample the first rejected position or draw the bonus token.
pub fn verify_parallel<M: ArModel + ?Sized>(
    target: &M,
    ctx: &[LatentToken],
    condition: &LatentToken,
    batch: &DraftBatch,
    cfg: &SpecConfig,
    rng: &RandomSource,
) -> Result<VerificationResult> {
    cfg.validate()?;
    batch.check(cfg.gamma)?;
    let sched = cfg.schedule()?;
    let dim = target.dim();
    for tok in &batch.tokens {
        check_dim(dim, tok.dim())?;
    }
    let sigma = sigma_factor(&batch.step_vars, &cfg.step_vars(&sched, dim))?;
    let kappa = cfg.trajectory_coupling;

    let mut seq = ctx.to_vec();
    let mut target_dists = Vec::with_capacity(batch.len() + 1);
    for i in 0..=batch.len() {
        if i > 0 {
            seq.push(batch.tokens[i - 1].clone());
        }
        target_dists.push(next_params(target, &seq, condition, cfg)?.1);
    }

    let mut p_conds = Vec::with_capacity(batch.len());
    let mut q_conds = Vec::with_capacity(batch.len());
    let mut ratios = Vec::with_capacity(batch.len());
    for (i, tok) in batch.tokens.iter().enumerate() {
        let u_target = if cfg.share_noise {
            batch.trajectories[i].clone()
        } else {
            trajectory(&sched, dim, &mut trajectory_stream(rng, false, i + 1))
        };
        let p = conditional(&target_dists[i], &u_target, kappa)?;
        let q = conditional(&batch.dists[i], &batch.trajectories[i], kappa)?;
        let x = tok.as_slice();
        ratios.push(pdf_ratio_capped(
            p.log_density(x)?,
            q.log_density(x)?,
            sigma,
            cfg.ratio_cap,
        )?);
        p_conds.push(p);
        q_conds.push(q);
    }

    let accepted_n = accept_prefix(&ratios, &mut rng.substream("accept"));
    let mut result = VerificationResult {
        target_dists,
        sigma_factor: sigma,
        ratios,
        accepted_n,
        resampled: None,
        bonus: None,
        resample_iters: 0,
    };
    if accepted_n < batch.len() {
        let (tok, iters) = resample_rejected(
            &p_conds[accepted_n],
            &q_conds[accepted_n],
            sigma,
            &mut rng.substream("resample"),
            cfg.resample_cap,
        )?;
        result.resampled = Some(tok);
        result.resample_iters = iters;
    } else if cfg.bonus_token || batch.is_empty() {
        let p = &result.target_dists[batch.len()];
        result.bonus = Some(sample_gaussian(p, &mut rng.substream("bonus")));
    }
    Ok(result)
}

/// Generate `seq_len` tokens after a zero start token.
pub fn run_cspd<T: ArModel + ?Sized, D: ArModel + ?Sized>(
    target: &T,
    draft: &D,
    condition: &LatentToken,
    seq_len: usize,
    cfg: &SpecConfig,
    rng: &RandomSource,
) -> Result<(Vec<LatentToken>, RunMetrics)> {
    cfg.validate()?;
    if seq_len == 0 {
        return Err(invalid("seq_len must be >= 1"));
    }
    check_dim(target.dim(), draft.dim())?;
    check_dim(target.dim(), condition.dim())?;
    let mut ctx = vec![LatentToken::zeros(target.dim())];
    let mut metrics = RunMetrics::default();

    let prefill = (cfg.prefix_fraction * seq_len as f64).ceil() as usize;
    for k in 0..prefill.min(seq_len) {
        let (_, p) = next_params(target, &ctx, condition, cfg)?;
        ctx.push(sample_gaussian(
            &p,
            &mut rng.substream_at("prefill", &[k as u64]),
        ));
        metrics.prefill_tokens += 1;
    }

    let mut round = 0;
    while ctx.len() - 1 < seq_len {
        let remaining = seq_len - (ctx.len() - 1);
        let limit = if cfg.bonus_token {
            remaining - 1
        } else {
            remaining
        };
        let round_rng = rng.substream_at("round", &[round as u64]);
        let batch = draft_generate_n(draft, &ctx, condition, cfg, limit, &round_rng)?;
        let ver = verify_parallel(target, &ctx, condition, &batch, cfg, &round_rng)?;

        let n = ver.accepted_n;
        ctx.extend(batch.tokens[..n].iter().cloned());
        let extra = ver.resampled.clone().or_else(|| ver.bonus.clone());
        let bonus_emitted = ver.bonus.is_some();
        if let Some(tok) = extra {
            ctx.push(tok);
        }

        let rejected = batch.len() - n;
        metrics.rounds.push(RoundTrace {
            round,
            drafted: batch.drafted(),
            accepted: n,
            rejected,
            skipped: usize::from(batch.stopped_early),
            stopped_early: batch.stopped_early,
            stop_index: batch.stop_index,
            sigma: ver.sigma_factor,
            ratios: ver.ratios.clone(),
            resample_iters: ver.resample_iters,
            bonus_emitted,
            emitted: n + usize::from(ver.resampled.is_some() || bonus_emitted),
        });
        metrics.draft_calls += batch.draft_calls;
        metrics.target_rounds += 1;
        metrics.target_evals += batch.len() + 1;
        metrics.early_stops += usize::from(batch.stopped_early);
        metrics.resample_iters += ver.resample_iters;
        metrics.accepted += n;
        metrics.tested += n + usize::from(rejected > 0);
        round += 1;
    }
    ctx.remove(0);
    metrics.tokens = ctx.len();
    Ok((ctx, metrics))
}
