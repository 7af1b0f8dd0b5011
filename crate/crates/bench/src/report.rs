//! Trial rows, aggregates and the files written for a benchmark run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cspd_core::speculative::RunMetrics;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracles::histogram;

/// Bumped whenever the CSV columns change.
pub const CSV_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 16] = [
    "seed",
    "trial",
    "tokens",
    "prefill_tokens",
    "rounds",
    "drafted",
    "accepted",
    "rejected",
    "skipped",
    "tested",
    "early_stops",
    "target_rounds",
    "target_evals",
    "draft_calls",
    "resample_iters",
    "acceptance_rate",
];

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report has no trials")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("metrics.csv line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

/// Counters of one generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub seed: u64,
    pub trial: usize,
    pub tokens: usize,
    pub prefill_tokens: usize,
    pub rounds: usize,
    pub drafted: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub skipped: usize,
    pub tested: usize,
    pub early_stops: usize,
    pub target_rounds: usize,
    pub target_evals: usize,
    pub draft_calls: usize,
    pub resample_iters: usize,
}

impl TrialRow {
    pub fn from_metrics(seed: u64, trial: usize, m: &RunMetrics) -> Self {
        let sum =
            |f: fn(&cspd_core::speculative::RoundTrace) -> usize| m.rounds.iter().map(f).sum();
        Self {
            seed,
            trial,
            tokens: m.tokens,
            prefill_tokens: m.prefill_tokens,
            rounds: m.rounds.len(),
            drafted: sum(|r| r.drafted),
            accepted: m.accepted,
            rejected: sum(|r| r.rejected),
            skipped: sum(|r| r.skipped),
            tested: m.tested,
            early_stops: m.early_stops,
            target_rounds: m.target_rounds,
            target_evals: m.target_evals,
            draft_calls: m.draft_calls,
            resample_iters: m.resample_iters,
        }
    }

    fn counts(&self) -> [usize; 13] {
        [
            self.tokens,
            self.prefill_tokens,
            self.rounds,
            self.drafted,
            self.accepted,
            self.rejected,
            self.skipped,
            self.tested,
            self.early_stops,
            self.target_rounds,
            self.target_evals,
            self.draft_calls,
            self.resample_iters,
        ]
    }

    pub fn acceptance_rate(&self) -> f64 {
        ratio(self.accepted, self.tested)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

/// Pooled rates over all rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub trials: usize,
    pub tokens: usize,
    pub acceptance_rate: f64,
    pub rejection_rate: f64,
    pub mean_accepted_run: f64,
    /// Verification passes plus pre-fill steps per emitted token.
    pub verifier_calls_per_token: f64,
    /// Target positions scored plus pre-fill steps per emitted token.
    pub target_evals_per_token: f64,
    pub early_stop_rate: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[TrialRow]) -> Result<Self, ReportError> {
        if rows.is_empty() {
            return Err(ReportError::Empty);
        }
        let total = |f: fn(&TrialRow) -> usize| rows.iter().map(f).sum::<usize>();
        let tokens = total(|r| r.tokens);
        let rounds = total(|r| r.rounds);
        let prefill = total(|r| r.prefill_tokens);
        let acceptance = ratio(total(|r| r.accepted), total(|r| r.tested));
        Ok(Self {
            trials: rows.len(),
            tokens,
            acceptance_rate: acceptance,
            rejection_rate: 1.0 - acceptance,
            mean_accepted_run: ratio(total(|r| r.accepted), rounds.max(1)),
            verifier_calls_per_token: ratio(total(|r| r.target_rounds) + prefill, tokens),
            target_evals_per_token: ratio(total(|r| r.target_evals) + prefill, tokens),
            early_stop_rate: ratio(total(|r| r.early_stops), rounds.max(1)),
        })
    }

    /// Largest absolute difference over the rate fields; NaN pairs count as equal.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = self.rates();
        let b = other.rates();
        let mut worst: f64 = if (self.trials, self.tokens) == (other.trials, other.tokens) {
            0.0
        } else {
            f64::INFINITY
        };
        for (x, y) in a.iter().zip(&b) {
            if x.is_nan() && y.is_nan() {
                continue;
            }
            let d = (x - y).abs();
            worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
        }
        worst
    }

    fn rates(&self) -> [f64; 6] {
        [
            self.acceptance_rate,
            self.rejection_rate,
            self.mean_accepted_run,
            self.verifier_calls_per_token,
            self.target_evals_per_token,
            self.early_stop_rate,
        ]
    }
}

/// Shallow-indicator histogram with 64 uniform bins over `[0, ln R_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub samples: usize,
}

impl EntropyHistogram {
    pub fn new(values: &[f64], max_context: usize) -> Self {
        let hi = (max_context.max(2) as f64).ln();
        Self {
            lo: 0.0,
            hi,
            counts: histogram(values, 0.0, hi, HISTOGRAM_BINS),
            samples: values.len(),
        }
    }

    pub fn to_csv(&self) -> String {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        let mut out = String::from("bin_lo,bin_hi,center,count,density\n");
        for (i, &c) in self.counts.iter().enumerate() {
            let lo = self.lo + i as f64 * width;
            let density = c as f64 / (self.samples.max(1) as f64 * width);
            writeln!(
                out,
                "{},{},{},{},{}",
                lo,
                lo + width,
                lo + 0.5 * width,
                c,
                density
            )
            .unwrap();
        }
        out
    }
}

/// One embedded check of a benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    /// `None` when the check does not apply to this configuration.
    pub passed: Option<bool>,
    pub detail: String,
}

impl Assertion {
    pub fn check(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: Some(passed),
            detail,
        }
    }

    pub fn skipped(name: &str, detail: &str) -> Self {
        Self {
            name: name.into(),
            passed: None,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        let tag = match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

/// Per-seed training and calibration outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub tau: Option<f64>,
    pub generator_distance: Option<f64>,
    pub diverged: Option<String>,
    pub logs: Vec<cspd_core::train::TrainLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub wall_seconds_per_token: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub csv_version: u32,
    pub rows: Vec<TrialRow>,
    pub aggregates: Aggregates,
    /// KS statistic between speculative and directly sampled tokens.
    pub ks_statistic: Option<f64>,
    pub seeds: Vec<SeedSummary>,
    pub draft_entropy: EntropyHistogram,
    pub target_entropy: EntropyHistogram,
    pub assertions: Vec<Assertion>,
    pub timing: Timing,
}

impl MetricsReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed != Some(false))
    }

    pub fn mean_generator_distance(&self) -> Option<f64> {
        let ds: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|s| s.generator_distance)
            .collect();
        (ds.len() == self.seeds.len() && !ds.is_empty())
            .then(|| ds.iter().sum::<f64>() / ds.len() as f64)
    }
}

pub fn rows_to_csv(rows: &[TrialRow]) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut out = format!("# metrics v{CSV_VERSION}\n{}\n", CSV_COLUMNS.join(","));
    for r in rows {
        write!(out, "{},{}", r.seed, r.trial).unwrap();
        for c in r.counts() {
            write!(out, ",{c}").unwrap();
        }
        writeln!(out, ",{}", r.acceptance_rate()).unwrap();
    }
    Ok(out)
}

pub fn rows_from_csv(text: &str) -> Result<Vec<TrialRow>, ReportError> {
    let err = |line: usize, detail: String| ReportError::Parse { line, detail };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, v)) if v == format!("# metrics v{CSV_VERSION}") => {}
        other => return Err(err(1, format!("expected version header, got {other:?}"))),
    }
    match lines.next() {
        Some((_, h)) if h == CSV_COLUMNS.join(",") => {}
        other => return Err(err(2, format!("unexpected column header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CSV_COLUMNS.len() {
            return Err(err(
                i + 1,
                format!(
                    "expected {} fields, got {}",
                    CSV_COLUMNS.len(),
                    fields.len()
                ),
            ));
        }
        let int = |k: usize| -> Result<usize, ReportError> {
            fields[k]
                .parse()
                .map_err(|e| err(i + 1, format!("{}: {e}", CSV_COLUMNS[k])))
        };
        rows.push(TrialRow {
            seed: fields[0]
                .parse()
                .map_err(|e| err(i + 1, format!("seed: {e}")))?,
            trial: int(1)?,
            tokens: int(2)?,
            prefill_tokens: int(3)?,
            rounds: int(4)?,
            drafted: int(5)?,
            accepted: int(6)?,
            rejected: int(7)?,
            skipped: int(8)?,
            tested: int(9)?,
            early_stops: int(10)?,
            target_rounds: int(11)?,
            target_evals: int(12)?,
            draft_calls: int(13)?,
            resample_iters: int(14)?,
        });
    }
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(rows)
}

fn write(path: PathBuf, text: &str) -> Result<(), ReportError> {
    std::fs::write(&path, text).map_err(|source| ReportError::Io { path, source })
}

/// Write `metrics.csv`, `summary.json` and the two histogram files into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let csv = rows_to_csv(&report.rows)?;
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let summary_path = dir.join("summary.json");
    let summary = serde_json::to_string_pretty(&summary_json(report)).map_err(|source| {
        ReportError::Json {
            path: summary_path.clone(),
            source,
        }
    })?;
    let files = [
        (dir.join("metrics.csv"), csv),
        (summary_path, summary),
        (dir.join("entropy_draft.csv"), report.draft_entropy.to_csv()),
        (
            dir.join("entropy_target.csv"),
            report.target_entropy.to_csv(),
        ),
    ];
    let mut written = Vec::new();
    for (path, text) in files {
        write(path.clone(), &text)?;
        written.push(path);
    }
    Ok(written)
}

fn summary_json(report: &MetricsReport) -> serde_json::Value {
    serde_json::json!({
        "experiment": report.experiment,
        "artifact_version": format!("{}+csv{}", env!("CARGO_PKG_VERSION"), CSV_VERSION),
        "aggregates": report.aggregates,
        "ks_statistic": report.ks_statistic,
        "seeds": report.seeds,
        "assertions": report.assertions,
        "timing": report.timing,
    })
}
