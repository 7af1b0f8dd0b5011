//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::process::Command;
use std::time::{Duration, Instant};

use cspd_bench::config::ExperimentConfig;
use cspd_bench::harness::{run_ablation, Variant};
use cspd_bench::oracles::{expected_acceptance_oracle, histogram_tv, ks_statistic};
use cspd_bench::pipeline::prepare;
use cspd_bench::verify::{
    cd_grad_error, dmd_field_error, entropy_grad_error, entropy_logit_grad_error,
    ode_endpoint_error, reg_grad_error,
};
use cspd_core::entropy::{
    calibrate_threshold, entropy_loss, EntropyStats, IndicatorAccumulator, ThresholdConfig,
};
use cspd_core::latent::{sample_gaussian, AttentionMap};
use cspd_core::speculative::{resample_rejected, run_cspd, SpecConfig};
use cspd_core::train::{alpha_schedule, TrainConfig};
use cspd_core::{AnalyticGaussianModel, GaussianParams, LatentToken, RandomSource};
use ndarray::Array2;
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = anyhow::Result<(bool, String)>;

fn gaussian(m: f64, v: f64) -> GaussianParams {
    GaussianParams::new(vec![m], vec![v]).unwrap()
}

fn analytic(m: f64, v: f64) -> AnalyticGaussianModel {
    AnalyticGaussianModel::new(gaussian(m, v))
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let took = start.elapsed();
    (
        took < limit,
        format!("{:.1}s of {}s", took.as_secs_f64(), limit.as_secs()),
    )
}

/// Speculative output vs direct target sampling, 1-D analytic models.
fn losslessness() -> Outcome {
    let start = Instant::now();
    let target = analytic(0.0, 1.0);
    let draft = analytic(0.6, 1.44);
    let cond = LatentToken::zeros(1);
    let (tokens, seq_len) = (100_000, 20);
    let mut worst: f64 = 0.0;
    for gamma in [1, 4, 8] {
        let cfg = SpecConfig {
            gamma,
            ..Default::default()
        };
        for seed in 1..=5u64 {
            let root = RandomSource::new(seed);
            let mut spec = Vec::with_capacity(tokens);
            for i in 0..tokens / seq_len {
                let (out, _) = run_cspd(
                    &target,
                    &draft,
                    &cond,
                    seq_len,
                    &cfg,
                    &root.substream_at("seq", &[i as u64]),
                )?;
                spec.extend(out.into_iter().map(LatentToken::into_vec));
            }
            let mut r = root.substream("direct");
            let direct: Vec<Vec<f64>> = (0..tokens)
                .map(|_| sample_gaussian(target.params(), &mut r).into_vec())
                .collect();
            worst = worst.max(ks_statistic(&spec, &direct)?);
        }
    }
    let (fast, took) = within(Duration::from_secs(120), start);
    Ok((
        worst <= 0.02 && fast,
        format!(
            "max KS {worst:.4} over gamma {{1, 4, 8}} x 5 seeds at 1e5 tokens (limit 0.02); {took}"
        ),
    ))
}

/// Empirical acceptance vs the quadrature oracle.
fn acceptance_calibration() -> Outcome {
    let start = Instant::now();
    let target = analytic(0.0, 1.0);
    let cond = LatentToken::zeros(1);
    let cfg = SpecConfig::default();
    let normal = Normal::new(0.0, 1.0)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, mu) in [0.25, 0.5, 1.0, 2.0].into_iter().enumerate() {
        let draft = analytic(mu, 1.0);
        let oracle = expected_acceptance_oracle(target.params(), draft.params())?;
        let closed = 2.0 * normal.cdf(-mu / 2.0);
        let root = RandomSource::new(100 + k as u64);
        let (mut accepted, mut tested, mut i) = (0usize, 0usize, 0u64);
        while tested < 100_000 {
            let (_, m) = run_cspd(
                &target,
                &draft,
                &cond,
                20,
                &cfg,
                &root.substream_at("seq", &[i]),
            )?;
            accepted += m.accepted;
            tested += m.tested;
            i += 1;
        }
        let rate = accepted as f64 / tested as f64;
        ok &= (rate - oracle).abs() <= 0.01 && (oracle - closed).abs() < 1e-6;
        parts.push(format!("mu {mu}: {rate:.4} vs {oracle:.4}"));
    }
    let (fast, took) = within(Duration::from_secs(60), start);
    Ok((
        ok && fast,
        format!(
            "{} (tolerance 0.01, >= 1e5 tests each); {took}",
            parts.join(", ")
        ),
    ))
}

/// Residual resampling against the normalised `max(0, p − q)`.
fn resampling() -> Outcome {
    let start = Instant::now();
    let pairs = [
        (gaussian(0.0, 1.0), gaussian(1.0, 1.0)),
        (gaussian(0.0, 1.0), gaussian(0.0, 0.25)),
        (gaussian(0.5, 2.0), gaussian(-1.0, 1.0)),
    ];
    let bins = 20;
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, (p, q)) in pairs.iter().enumerate() {
        let mut rng = RandomSource::new(200 + k as u64);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                resample_rejected(p, q, 1.0, &mut rng, 1_000_000).map(|(x, _)| x.as_slice()[0])
            })
            .collect::<cspd_core::Result<_>>()?;
        let residual = |x: f64| {
            let lp = p.log_density(&[x]).unwrap().exp();
            let lq = q.log_density(&[x]).unwrap().exp();
            (lp - lq).max(0.0)
        };
        let (m, s) = (p.mean()[0], p.var()[0].sqrt());
        let tv = histogram_tv(
            &draws,
            &residual,
            m - 5.0 * s,
            m + 5.0 * s,
            (m - 40.0 * s, m + 40.0 * s),
            bins,
        )?;
        ok &= tv < 0.01;
        parts.push(format!("{tv:.4}"));
    }
    let (fast, took) = within(Duration::from_secs(60), start);
    Ok((
        ok && fast,
        format!(
            "TV [{}] on {bins} bins from 1e5 draws (limit 0.01); {took}",
            parts.join(", ")
        ),
    ))
}

/// Uniform and one-hot maps, then gradients at 100 random points.
fn entropy_exactness() -> Outcome {
    let mut exact = true;
    for r in 1..=128usize {
        for heads in [1, 2, 3, 8] {
            exact &= entropy_loss(&vec![AttentionMap::uniform(r); heads])? == -(r as f64).ln();
            let maps: Vec<AttentionMap> = (0..heads)
                .map(|h| {
                    AttentionMap::new(Array2::from_shape_fn((r, r), |(i, j)| {
                        f64::from((i * 5 + h) % r == j)
                    }))
                })
                .collect::<cspd_core::Result<_>>()?;
            exact &= entropy_loss(&maps)? == 0.0;
        }
    }
    let mut worst: f64 = 0.0;
    for k in 0..100u64 {
        worst = worst.max(entropy_logit_grad_error(300 + k, 2 + (k as usize % 9))?);
    }
    Ok((
        exact && worst < 1e-4,
        format!("uniform = -ln R and one-hot = 0 bit-exact for R <= 128: {exact}; worst gradient rel. error {worst:.2e} over 100 points"),
    ))
}

/// Loss-weight schedule endpoints and the threshold formula.
fn schedule_and_threshold() -> Outcome {
    let cfg = TrainConfig::default();
    let total = cfg.total() as f64;
    let (a0, mid, a1) = (
        alpha_schedule(0.0, &cfg)?,
        alpha_schedule(total / 2.0, &cfg)?,
        alpha_schedule(total, &cfg)?,
    );
    let alpha_ok =
        (a0 - 0.95).abs() <= 1e-12 && (mid - 0.5).abs() <= 1e-12 && (a1 - 0.05).abs() <= 1e-12;
    let th = ThresholdConfig::default();
    let mut worst: f64 = 0.0;
    for (m, s) in [(1.7, 0.4), (0.0, 0.0), (2.3, 1.1), (0.05, 0.9)] {
        let tau = calibrate_threshold(&EntropyStats::new(m, s, 10, 0)?, &th);
        worst = worst.max((tau - (0.3 * m - 0.1 * s)).abs());
    }
    let mut acc = IndicatorAccumulator::default();
    for x in [1.0, 2.0, 3.0, 4.0, 5.0] {
        acc.push(x);
    }
    let tau = calibrate_threshold(&acc.finish(0)?, &th);
    worst = worst.max((tau - (0.9 - 0.1 * 2.5f64.sqrt())).abs());
    Ok((
        alpha_ok && worst <= 1e-12,
        format!("alpha {a0} / {mid} / {a1}; worst threshold deviation {worst:e}"),
    ))
}

/// Entropy-trained draft vs the draft trained without the entropy term.
fn entropy_training() -> Outcome {
    let start = Instant::now();
    let report = run_ablation(&ExperimentConfig::entropy_task(), Variant::A)?;
    let cmp = report
        .comparison("rejection_rate")
        .expect("variant A compares rejection");
    let reductions = cmp.relative_reductions();
    let hits = reductions.iter().filter(|&&r| r >= 0.2).count();
    let shown: Vec<String> = reductions
        .iter()
        .map(|r| format!("{:.1}%", 100.0 * r))
        .collect();
    let (fast, took) = within(Duration::from_secs(600), start);
    Ok((
        hits >= 4 && fast,
        format!(
            "relative rejection reduction per seed [{}]; {hits}/5 at >= 20% (full-scale reference: 40%); {took}",
            shown.join(", ")
        ),
    ))
}

/// Two-stage schedule vs distribution matching from scratch.
fn two_stage_stability() -> Outcome {
    let start = Instant::now();
    let report = run_ablation(&ExperimentConfig::distill_task(), Variant::C)?;
    let cmp = report
        .comparison("generator_distance")
        .expect("variant C compares distance");
    let stable = report
        .full
        .seeds
        .iter()
        .filter(|s| s.diverged.is_none())
        .count();
    let better = cmp.seeds_full_better();
    let pairs: Vec<String> = cmp
        .per_seed
        .iter()
        .map(|s| format!("{:.3}/{:.3}", s.full, s.ablated))
        .collect();
    let (fast, took) = within(Duration::from_secs(600), start);
    Ok((
        stable == 5 && better >= 4 && fast,
        format!(
            "two-stage without divergence on {stable}/5 seeds; strictly closer than stage-2-only on {better}/5 (KS two-stage/stage-2-only [{}]); {took}",
            pairs.join(", ")
        ),
    ))
}

/// Early stopping on a rigged low-entropy draft, with every trace line checked.
fn early_stop_accounting() -> Outcome {
    let cfg = ExperimentConfig::early_stop_task();
    let report = run_ablation(&cfg, Variant::D)?;
    let evals = report
        .comparison("target_evals_per_token")
        .expect("variant D compares evaluations");
    let rounds = report
        .comparison("verifier_calls_per_token")
        .expect("variant D compares passes");
    let mut lines = 0usize;
    let mut broken = 0usize;
    for variant_cfg in [
        cfg.clone(),
        cspd_bench::harness::ablated_config(&cfg, Variant::D)?,
    ] {
        for &seed in &variant_cfg.seeds {
            let prep = prepare(&variant_cfg, seed)?;
            let root = RandomSource::new(seed);
            for i in 0..variant_cfg.trials {
                let (_, m) = run_cspd(
                    prep.models.target(),
                    prep.models.draft(),
                    &prep.models.condition(i),
                    variant_cfg.seq_len,
                    &prep.spec,
                    &root.substream_at("eval", &[i as u64]),
                )?;
                for line in m.trace_jsonl()?.lines() {
                    let v: serde_json::Value = serde_json::from_str(line)?;
                    let field = |k: &str| v[k].as_u64().unwrap_or(u64::MAX);
                    lines += 1;
                    broken += usize::from(
                        field("drafted")
                            != field("accepted") + field("rejected") + field("skipped"),
                    );
                }
            }
        }
    }
    let stops: usize = report.full.rows.iter().map(|r| r.early_stops).sum();
    Ok((
        evals.full < evals.ablated && stops > 0 && broken == 0 && lines > 0,
        format!(
            "target evaluations per token {:.3} with early stop vs {:.3} without ({} early stops); verification passes per token {:.3} vs {:.3}; {broken} of {lines} trace lines break drafted = accepted + rejected + skipped",
            evals.full, evals.ablated, stops, rounds.full, rounds.ablated
        ),
    ))
}

/// Finite-difference checks and probability-flow integration.
fn gradient_suite() -> Outcome {
    let mut worst = [0.0f64; 4];
    for seed in 1..=5u64 {
        worst[0] = worst[0].max(reg_grad_error(seed)?);
        worst[1] = worst[1].max(entropy_grad_error(seed)?);
        worst[2] = worst[2].max(cd_grad_error(seed)?);
        worst[3] = worst[3].max(dmd_field_error(seed, 20)?);
    }
    let grads_ok = worst.iter().all(|&e| e < 1e-4);
    let standard: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|&s| ode_endpoint_error(64, s, 0.0, 1.0))
        .collect::<cspd_core::Result<_>>()?;
    let shifted: Vec<f64> = [1, 2, 4, 8]
        .iter()
        .map(|&s| ode_endpoint_error(64, s, 0.4, 0.25))
        .collect::<cspd_core::Result<_>>()?;
    let ode_ok = standard.iter().all(|&e| e < 1e-3) && shifted.windows(2).all(|w| w[1] < w[0]);
    Ok((
        grads_ok && ode_ok,
        format!(
            "rel. errors reg {:.1e}, entropy {:.1e}, cd {:.1e}, dmd field {:.1e}; standard-normal flow error at T = 64 {:.1e}; N(0.4, 0.25) error by refinement {:?}",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            standard[0],
            shifted.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()
        ),
    ))
}

/// Two `bench` invocations must write identical metrics.csv files.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_cspd"))
            .args([
                "--preset", "distill", "--trials", "20", "--seed", "7", "bench", "--out",
            ])
            .arg(&out)
            .output()?;
        if !status.status.success() {
            return Ok((
                false,
                format!(
                    "bench exited with {}: {}",
                    status.status,
                    String::from_utf8_lossy(&status.stdout)
                ),
            ));
        }
        outputs.push(std::fs::read(out.join("metrics.csv"))?);
    }
    let same = outputs[0] == outputs[1];
    Ok((
        same && !outputs[0].is_empty(),
        format!(
            "metrics.csv byte-identical across invocations: {same} ({} bytes)",
            outputs[0].len()
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("losslessness", losslessness),
        ("acceptance calibration", acceptance_calibration),
        ("resampling correctness", resampling),
        ("entropy-loss exactness", entropy_exactness),
        ("schedule and threshold exactness", schedule_and_threshold),
        ("entropy-training effect", entropy_training),
        ("two-stage stability", two_stage_stability),
        ("early-stop accounting", early_stop_accounting),
        ("gradient suite", gradient_suite),
        ("determinism", determinism),
    ];
    let filter: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let n = k + 1;
        if filter.is_some_and(|f| f != n) {
            continue;
        }
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!ok);
        println!(
            "{} criterion {n} ({name}): {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
