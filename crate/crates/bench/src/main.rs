use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use cspd_bench::config::{CalibrationSource, ExperimentConfig, Pipeline};
use cspd_bench::harness::{run_ablation, run_benchmark, Variant};
use cspd_bench::pipeline::{prepare, Models};
use cspd_bench::report::{emit_report, Assertion};
use cspd_bench::verify::verify_suite;
use cspd_core::models::checkpoint::Checkpoint;

/// Continuous-latent speculative decoding: calibration, training,
/// benchmarks and ablations on toy models.
#[derive(Parser, Debug)]
#[command(name = "cspd", version)]
struct Cli {
    /// Experiment config (JSON, unknown keys rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in experiment used when no config is given: entropy, distill,
    /// early-stop or analytic.
    #[arg(long, global = true, default_value = "analytic")]
    preset: String,
    /// Run this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sequences per seed.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute shallow-entropy statistics and the early-stop threshold.
    Calibrate,
    /// Run the configured training pipeline; write checkpoints and loss logs.
    Train,
    /// Run the benchmark and its embedded assertions.
    Bench,
    /// Run the full pipeline against one ablated variant.
    Ablate {
        #[arg(long, value_enum)]
        variant: Variant,
    },
    /// Run the invariant and oracle suite.
    Verify,
    /// Print the resolved config as JSON.
    ShowConfig,
}

fn load(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&cli.preset)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(trials) = cli.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn print_assertions(list: &[Assertion]) -> bool {
    for a in list {
        println!("{}", a.line());
    }
    list.iter().all(|a| a.passed != Some(false))
}

fn calibrate(mut cfg: ExperimentConfig) -> anyhow::Result<bool> {
    if cfg.calibrate.is_none() {
        cfg.calibrate = Some(CalibrationSource::Draft);
    }
    create(&cfg.out_dir)?;
    for &seed in &cfg.seeds {
        let prep = prepare(&cfg, seed)?;
        let rec = prep.calibration.context("calibration needs toy models")?;
        let path = cfg.out_dir.join(format!("calibration_seed{seed}.json"));
        rec.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        println!(
            "seed {seed}: tau {:.6} (mean {:.6}, std {:.6}, n {}) -> {}",
            rec.tau,
            rec.mean_indicator,
            rec.std_indicator,
            rec.sample_count,
            path.display()
        );
    }
    Ok(true)
}

fn train(cfg: ExperimentConfig) -> anyhow::Result<bool> {
    if cfg.pipeline == Pipeline::None {
        bail!("config {:?} has no training pipeline", cfg.experiment);
    }
    create(&cfg.out_dir)?;
    let mut stable = true;
    for &seed in &cfg.seeds {
        let prep = prepare(&cfg, seed)?;
        let Models::Toy(m) = &prep.models else {
            bail!("training needs toy models");
        };
        let dir = cfg.out_dir.join(format!("seed{seed}"));
        create(&dir)?;
        for log in &prep.logs {
            log.save_csv(&dir.join(format!("train_{}.csv", log.stage.label())))?;
        }
        Checkpoint::from_toy(&m.draft).save(&dir.join("draft.json"))?;
        Checkpoint::from_toy(&m.target).save(&dir.join("target.json"))?;
        Checkpoint::from_denoiser(&m.student).save(&dir.join("student.json"))?;
        match &prep.diverged {
            Some(msg) => {
                stable = false;
                println!("seed {seed}: {msg}");
            }
            None => println!(
                "seed {seed}: generator distance {:.5} -> {}",
                prep.generator_distance.unwrap_or(f64::NAN),
                dir.display()
            ),
        }
    }
    Ok(stable)
}

fn bench(cfg: ExperimentConfig) -> anyhow::Result<bool> {
    let report = run_benchmark(&cfg)?;
    let a = &report.aggregates;
    println!(
        "{}: {} trials, acceptance {:.4}, verifier calls/token {:.4}, target evals/token {:.4}, early-stop rate {:.4}",
        report.experiment,
        a.trials,
        a.acceptance_rate,
        a.verifier_calls_per_token,
        a.target_evals_per_token,
        a.early_stop_rate
    );
    let ok = print_assertions(&report.assertions);
    println!("report written to {}", cfg.out_dir.display());
    Ok(ok)
}

fn ablate(cfg: ExperimentConfig, variant: Variant) -> anyhow::Result<bool> {
    let out = cfg.out_dir.clone();
    let report = run_ablation(&cfg, variant)?;
    emit_report(&report.full, &out.join("full"))?;
    emit_report(&report.ablated, &out.join(format!("ablated-{variant:?}")))?;
    let path = out.join(format!("ablation-{variant:?}.json"));
    let summary = serde_json::json!({
        "variant": report.variant,
        "comparisons": report.comparisons,
        "structural": report.structural,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", path.display()))?;
    for c in &report.comparisons {
        println!(
            "{}: full {:.5} vs ablated {:.5}; full better on {}/{} seeds",
            c.metric,
            c.full,
            c.ablated,
            c.seeds_full_better(),
            c.per_seed.len()
        );
    }
    let mut ok = print_assertions(&report.structural);
    ok &= report.full.passed() && report.ablated.passed();
    Ok(ok)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Command::Verify = cli.command {
        return Ok(print_assertions(&verify_suite()));
    }
    let cfg = load(&cli)?;
    match cli.command {
        Command::Calibrate => calibrate(cfg),
        Command::Train => train(cfg),
        Command::Bench => bench(cfg),
        Command::Ablate { variant } => ablate(cfg, variant),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(true)
        }
        Command::Verify => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
