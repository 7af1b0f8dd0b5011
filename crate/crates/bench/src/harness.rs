//! Benchmark runs with embedded assertions, and the paired ablations.

use std::time::Instant;

use anyhow::{ensure, Context};
use cspd_core::entropy::{
    calibrate_threshold, shallow_entropy_indicator, EntropyStats, ThresholdConfig,
};
use cspd_core::speculative::{next_params, run_cspd, sample_direct, RunMetrics};
use cspd_core::train::{LossTerm, StageKind};
use cspd_core::{ArModel, LatentToken, RandomSource};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelSpec, Pipeline};
use crate::oracles::{expected_acceptance_oracle, ks_critical, ks_statistic};
use crate::pipeline::{prepare, Models, Prepared};
use crate::report::{
    emit_report, rows_from_csv, rows_to_csv, Aggregates, Assertion, EntropyHistogram,
    MetricsReport, SeedSummary, Timing, TrialRow, CSV_VERSION,
};

/// Significance level of the embedded KS check.
pub const KS_ALPHA: f64 = 1e-3;

struct SeedRun {
    rows: Vec<TrialRow>,
    spec_tokens: Vec<Vec<f64>>,
    direct_tokens: Vec<Vec<f64>>,
    draft_indicators: Vec<f64>,
    target_indicators: Vec<f64>,
    identity_violations: usize,
    length_violations: usize,
    metrics: RunMetrics,
}

fn run_seed(cfg: &ExperimentConfig, prep: &Prepared) -> anyhow::Result<SeedRun> {
    let root = RandomSource::new(prep.seed);
    let target = prep.models.target();
    let draft = prep.models.draft();
    let layer = ThresholdConfig {
        shallow_layer: prep.spec.shallow_layer,
        ..Default::default()
    };
    let mut run = SeedRun {
        rows: Vec::with_capacity(cfg.trials),
        spec_tokens: Vec::new(),
        direct_tokens: Vec::new(),
        draft_indicators: Vec::new(),
        target_indicators: Vec::new(),
        identity_violations: 0,
        length_violations: 0,
        metrics: RunMetrics::default(),
    };
    for i in 0..cfg.trials {
        let cond = prep.models.condition(i);
        let (tokens, metrics) = run_cspd(
            target,
            draft,
            &cond,
            cfg.seq_len,
            &prep.spec,
            &root.substream_at("eval", &[i as u64]),
        )
        .with_context(|| format!("seed {} trial {i}", prep.seed))?;
        let direct = sample_direct(
            target,
            &cond,
            cfg.seq_len,
            &prep.spec,
            &root.substream_at("reference", &[i as u64]),
        )
        .with_context(|| format!("seed {} reference sample {i}", prep.seed))?;
        run.identity_violations += metrics
            .rounds
            .iter()
            .filter(|r| r.drafted != r.accepted + r.rejected + r.skipped)
            .count();
        run.length_violations +=
            usize::from(tokens.len() != cfg.seq_len || metrics.tokens != cfg.seq_len);
        let mut ctx = vec![LatentToken::zeros(target.dim())];
        ctx.extend(tokens.iter().cloned());
        for len in 2..=ctx.len() {
            run.draft_indicators.push(shallow_entropy_indicator(
                &draft.forward(&ctx[..len], &cond)?,
                &layer,
            )?);
            run.target_indicators.push(shallow_entropy_indicator(
                &target.forward(&ctx[..len], &cond)?,
                &layer,
            )?);
        }
        run.spec_tokens
            .extend(tokens.into_iter().map(LatentToken::into_vec));
        run.direct_tokens
            .extend(direct.into_iter().map(LatentToken::into_vec));
        run.rows
            .push(TrialRow::from_metrics(prep.seed, i, &metrics));
        run.metrics.merge(&metrics);
    }
    Ok(run)
}

fn seed_summary(prep: &Prepared) -> SeedSummary {
    SeedSummary {
        seed: prep.seed,
        tau: prep.calibration.as_ref().map(|c| c.tau),
        generator_distance: prep.generator_distance,
        diverged: prep.diverged.clone(),
        logs: prep.logs.clone(),
    }
}

fn early_stop_can_fire(cfg: &ExperimentConfig, preps: &[Prepared]) -> bool {
    let analytic = matches!(cfg.model, ModelSpec::Analytic { .. });
    !analytic
        && preps
            .iter()
            .any(|p| p.spec.early_stop && p.spec.tau_ent > 0.0)
}

/// Run every seed and trial, compute aggregates and evaluate the embedded
/// assertions. Nothing is written.
pub fn benchmark(cfg: &ExperimentConfig) -> anyhow::Result<MetricsReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut preps = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let prep = prepare(cfg, seed).with_context(|| format!("preparing seed {seed}"))?;
        runs.push(run_seed(cfg, &prep)?);
        preps.push(prep);
    }
    let rows: Vec<TrialRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let aggregates = Aggregates::from_rows(&rows)?;
    let mut assertions = Vec::new();

    let identity: usize = runs.iter().map(|r| r.identity_violations).sum();
    let lengths: usize = runs.iter().map(|r| r.length_violations).sum();
    let rounds: usize = runs.iter().map(|r| r.metrics.rounds.len()).sum();
    assertions.push(Assertion::check(
        "round-accounting",
        identity == 0 && lengths == 0,
        format!("{identity} of {rounds} rounds break drafted = accepted + rejected + skipped; {lengths} sequences have the wrong length"),
    ));

    let spec_tokens: Vec<Vec<f64>> = runs
        .iter()
        .flat_map(|r| r.spec_tokens.iter().cloned())
        .collect();
    let direct_tokens: Vec<Vec<f64>> = runs
        .iter()
        .flat_map(|r| r.direct_tokens.iter().cloned())
        .collect();
    let ks = ks_statistic(&spec_tokens, &direct_tokens)?;
    let sequences = rows.len();
    let critical = ks_critical(sequences, sequences, KS_ALPHA);
    assertions.push(if early_stop_can_fire(cfg, &preps) {
        Assertion::skipped(
            "losslessness",
            &format!("KS {ks:.4} reported only; early stopping on a context-dependent draft is not guaranteed lossless"),
        )
    } else {
        Assertion::check(
            "losslessness",
            ks <= critical,
            format!("KS {ks:.5} vs critical {critical:.5} (n = {sequences} sequences, alpha = {KS_ALPHA})"),
        )
    });

    for prep in &preps {
        if let Some(rec) = &prep.calibration {
            let stats = EntropyStats::new(
                rec.mean_indicator,
                rec.std_indicator,
                rec.sample_count,
                rec.shallow_layer,
            )?;
            let tau = calibrate_threshold(&stats, &cfg.threshold);
            assertions.push(Assertion::check(
                "threshold-calibration",
                (tau - rec.tau).abs() <= 1e-12 && prep.spec.tau_ent == rec.tau,
                format!("seed {}: tau {} recomputed {}", prep.seed, rec.tau, tau),
            ));
        }
    }
    if let Models::Analytic { target, draft } = &preps[0].models {
        if target.dim() == 1 && cfg.spec.trajectory_coupling == 0.0 {
            let cond = LatentToken::zeros(1);
            let ctx = [LatentToken::zeros(1)];
            let (_, p) = next_params(target, &ctx, &cond, &cfg.spec)?;
            let (_, q) = next_params(draft, &ctx, &cond, &cfg.spec)?;
            let expected = expected_acceptance_oracle(&p, &q)?;
            let tested: usize = rows.iter().map(|r| r.tested).sum();
            let tol = 5.0 * (expected * (1.0 - expected) / tested.max(1) as f64).sqrt() + 1e-9;
            let got = aggregates.acceptance_rate;
            assertions.push(Assertion::check(
                "acceptance-calibration",
                (got - expected).abs() <= tol,
                format!("empirical {got:.5} vs oracle {expected:.5} (tolerance {tol:.5} over {tested} tests)"),
            ));
        }
    }

    let recomputed = Aggregates::from_rows(&rows_from_csv(&rows_to_csv(&rows)?)?)?;
    let diff = aggregates.max_abs_diff(&recomputed);
    assertions.push(Assertion::check(
        "aggregate-recomputation",
        diff <= 1e-9,
        format!("max difference {diff:e} after CSV round trip"),
    ));

    if matches!(cfg.pipeline, Pipeline::Stage1 | Pipeline::TwoStage) {
        let diverged: Vec<u64> = preps
            .iter()
            .filter(|p| p.diverged.is_some())
            .map(|p| p.seed)
            .collect();
        assertions.push(Assertion::check(
            "training-stability",
            diverged.is_empty(),
            format!("diverged seeds: {diverged:?}"),
        ));
    }

    let draft_ind: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.draft_indicators.iter().copied())
        .collect();
    let target_ind: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.target_indicators.iter().copied())
        .collect();
    let wall = start.elapsed().as_secs_f64();
    Ok(MetricsReport {
        experiment: cfg.experiment.clone(),
        csv_version: CSV_VERSION,
        aggregates,
        rows,
        ks_statistic: Some(ks),
        seeds: preps.iter().map(seed_summary).collect(),
        draft_entropy: EntropyHistogram::new(&draft_ind, cfg.seq_len + 1),
        target_entropy: EntropyHistogram::new(&target_ind, cfg.seq_len + 1),
        assertions,
        timing: Timing {
            wall_seconds: wall,
            wall_seconds_per_token: wall / spec_tokens.len().max(1) as f64,
        },
    })
}

/// [`benchmark`] followed by writing the report into `cfg.out_dir`.
pub fn run_benchmark(cfg: &ExperimentConfig) -> anyhow::Result<MetricsReport> {
    let report = benchmark(cfg)?;
    emit_report(&report, &cfg.out_dir)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[value(rename_all = "UPPER")]
pub enum Variant {
    /// Entropy loss removed.
    A,
    /// Loss weight fixed at 0.5.
    B,
    /// Distribution matching without the consistency-distilled start.
    C,
    /// Early stopping disabled at inference.
    D,
}

/// `cfg` with one component removed.
pub fn ablated_config(
    cfg: &ExperimentConfig,
    variant: Variant,
) -> anyhow::Result<ExperimentConfig> {
    let mut out = cfg.clone();
    match variant {
        Variant::A | Variant::B => {
            ensure!(
                cfg.pipeline != Pipeline::None,
                "variant {variant:?} needs a training pipeline"
            );
            if variant == Variant::A {
                out.train.entropy_enabled = false;
            } else {
                out.train.fixed_alpha = Some(0.5);
            }
        }
        Variant::C => {
            ensure!(
                cfg.pipeline == Pipeline::TwoStage,
                "variant C needs the two-stage pipeline"
            );
            out.pipeline = Pipeline::Stage2Only;
        }
        Variant::D => {
            ensure!(
                cfg.spec.early_stop,
                "variant D needs early stopping enabled in the full run"
            );
            out.spec.early_stop = false;
        }
    }
    out.experiment = format!("{}-ablation-{variant:?}", cfg.experiment);
    out.out_dir = cfg.out_dir.join(format!("ablation-{variant:?}"));
    Ok(out)
}

/// Full-vs-ablated value of one metric for one seed; lower is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub full: f64,
    pub ablated: f64,
    pub full_diverged: bool,
    pub ablated_diverged: bool,
    /// Strictly lower for the full run; a diverged run is always worse.
    pub full_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub full: f64,
    pub ablated: f64,
    pub per_seed: Vec<SeedComparison>,
}

impl Comparison {
    pub fn seeds_full_better(&self) -> usize {
        self.per_seed.iter().filter(|s| s.full_better).count()
    }

    /// `1 − full / ablated` per seed.
    pub fn relative_reductions(&self) -> Vec<f64> {
        self.per_seed
            .iter()
            .map(|s| 1.0 - s.full / s.ablated)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub full: MetricsReport,
    pub ablated: MetricsReport,
    pub comparisons: Vec<Comparison>,
    /// Checks that the ablation removed what it claims to.
    pub structural: Vec<Assertion>,
}

impl AblationReport {
    pub fn comparison(&self, metric: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.metric == metric)
    }
}

fn seed_rows(report: &MetricsReport, seed: u64) -> anyhow::Result<Aggregates> {
    let rows: Vec<TrialRow> = report
        .rows
        .iter()
        .filter(|r| r.seed == seed)
        .cloned()
        .collect();
    Ok(Aggregates::from_rows(&rows)?)
}

fn compare(
    metric: &str,
    full: &MetricsReport,
    ablated: &MetricsReport,
    value: impl Fn(&MetricsReport, usize) -> anyhow::Result<f64>,
    overall: impl Fn(&MetricsReport) -> f64,
) -> anyhow::Result<Comparison> {
    let mut per_seed = Vec::new();
    for (k, (fs, abl)) in full.seeds.iter().zip(&ablated.seeds).enumerate() {
        let f = value(full, k)?;
        let a = value(ablated, k)?;
        let (fd, ad) = (fs.diverged.is_some(), abl.diverged.is_some());
        per_seed.push(SeedComparison {
            seed: fs.seed,
            full: f,
            ablated: a,
            full_diverged: fd,
            ablated_diverged: ad,
            full_better: !fd && (ad || f < a),
        });
    }
    Ok(Comparison {
        metric: metric.into(),
        full: overall(full),
        ablated: overall(ablated),
        per_seed,
    })
}

fn rejection(r: &MetricsReport, k: usize) -> anyhow::Result<f64> {
    Ok(seed_rows(r, r.seeds[k].seed)?.rejection_rate)
}

fn distance(r: &MetricsReport, k: usize) -> anyhow::Result<f64> {
    r.seeds[k]
        .generator_distance
        .context("generator distance missing; the pipeline ran no distillation")
}

fn evals(r: &MetricsReport, k: usize) -> anyhow::Result<f64> {
    Ok(seed_rows(r, r.seeds[k].seed)?.target_evals_per_token)
}

/// Run the full and the ablated pipeline on identical seeds.
pub fn run_ablation(cfg: &ExperimentConfig, variant: Variant) -> anyhow::Result<AblationReport> {
    let ablated_cfg = ablated_config(cfg, variant)?;
    let full = benchmark(cfg).context("full pipeline")?;
    let ablated = benchmark(&ablated_cfg).context("ablated pipeline")?;
    let mean_distance = |r: &MetricsReport| r.mean_generator_distance().unwrap_or(f64::NAN);
    let mut comparisons = Vec::new();
    let mut structural = Vec::new();
    let rows_of = |r: &MetricsReport| -> Vec<cspd_core::train::EpochRow> {
        r.seeds
            .iter()
            .flat_map(|s| s.logs.iter().flat_map(|l| l.rows.iter().cloned()))
            .collect()
    };
    match variant {
        Variant::A => {
            comparisons.push(compare(
                "rejection_rate",
                &full,
                &ablated,
                rejection,
                |r| r.aggregates.rejection_rate,
            )?);
            let rows = rows_of(&ablated);
            structural.push(Assertion::check(
                "entropy-removed",
                !ablated_cfg.train.registry().contains(&LossTerm::Entropy)
                    && !rows.is_empty()
                    && rows.iter().all(|r| r.entropy == 0.0),
                format!("{} logged rows, all entropy terms zero", rows.len()),
            ));
        }
        Variant::B => {
            comparisons.push(compare(
                "rejection_rate",
                &full,
                &ablated,
                rejection,
                |r| r.aggregates.rejection_rate,
            )?);
            if cfg.pipeline == Pipeline::TwoStage {
                comparisons.push(compare(
                    "generator_distance",
                    &full,
                    &ablated,
                    distance,
                    mean_distance,
                )?);
            }
            let rows = rows_of(&ablated);
            structural.push(Assertion::check(
                "alpha-fixed",
                rows.iter().all(|r| r.alpha == 0.5),
                format!("{} logged rows at alpha 0.5", rows.len()),
            ));
        }
        Variant::C => {
            comparisons.push(compare(
                "generator_distance",
                &full,
                &ablated,
                distance,
                mean_distance,
            )?);
            let stage1 = ablated
                .seeds
                .iter()
                .flat_map(|s| &s.logs)
                .filter(|l| l.stage == StageKind::Stage1)
                .count();
            structural.push(Assertion::check(
                "stage1-skipped",
                stage1 == 0,
                format!("{stage1} stage-1 logs in the ablated run"),
            ));
        }
        Variant::D => {
            comparisons.push(compare(
                "target_evals_per_token",
                &full,
                &ablated,
                evals,
                |r| r.aggregates.target_evals_per_token,
            )?);
            comparisons.push(compare(
                "verifier_calls_per_token",
                &full,
                &ablated,
                |r, k| Ok(seed_rows(r, r.seeds[k].seed)?.verifier_calls_per_token),
                |r| r.aggregates.verifier_calls_per_token,
            )?);
            let stops: usize = ablated.rows.iter().map(|r| r.early_stops).sum();
            structural.push(Assertion::check(
                "early-stop-disabled",
                stops == 0,
                format!("{stops} early stops in the ablated run"),
            ));
        }
    }
    Ok(AblationReport {
        variant,
        full,
        ablated,
        comparisons,
        structural,
    })
}
