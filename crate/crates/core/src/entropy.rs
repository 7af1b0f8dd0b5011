//! Attention-entropy loss, the shallow-layer indicator, threshold
//! calibration from training statistics, and the early-stop rule.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latent::{AttentionMap, LatentToken};
use crate::models::{ArModel, ModelOutput};

/// Mean of `Ω log Ω` over all rows of all heads' maps, `0·log 0 = 0`.
///
/// Lies in `[-log R, 0]`; more negative means higher entropy. Each row is
/// renormalised by its sum and equal entries are pooled, so a row spread
/// evenly over `k` columns scores exactly `-log k`.
pub fn entropy_loss(maps: &[AttentionMap]) -> Result<f64> {
    check_maps(maps)?;
    let mut mean = 0.0;
    let mut n = 0usize;
    for map in maps {
        for row in map.probs().rows() {
            n += 1;
            mean += (row_entropy(row.as_slice().expect("standard layout")).0 - mean) / n as f64;
        }
    }
    Ok(0.0 - mean)
}

/// Gradient of [`entropy_loss`] with respect to every map entry.
pub fn entropy_loss_grad(maps: &[AttentionMap]) -> Result<Vec<Array2<f64>>> {
    let r = check_maps(maps)?;
    let norm = 1.0 / (r * maps.len()) as f64;
    Ok(maps
        .iter()
        .map(|m| {
            let mut g = m.probs().clone();
            for mut row in g.rows_mut() {
                let (h, s) = row_entropy(row.as_slice().expect("standard layout"));
                row.mapv_inplace(|p| ((p.max(f64::MIN_POSITIVE) / s).ln() + h) * norm / s);
            }
            g
        })
        .collect())
}

/// Entropy of a non-negative row after normalisation, and the row sum.
fn row_entropy(row: &[f64]) -> (f64, f64) {
    let mut sorted: Vec<f64> = row.iter().copied().filter(|&p| p > 0.0).collect();
    sorted.sort_by(f64::total_cmp);
    let mut groups: Vec<(f64, f64)> = Vec::new();
    for p in sorted {
        match groups.last_mut() {
            Some((k, q)) if *q == p => *k += 1.0,
            _ => groups.push((1.0, p)),
        }
    }
    let mut total = NeumaierSum::default();
    groups.iter().for_each(|(k, p)| total.add(k * p));
    let s = total.value();
    let mut h = NeumaierSum::default();
    for (k, p) in &groups {
        let w = k * p / s;
        h.add(w * (k.ln() - w.ln()));
    }
    (h.value(), s)
}

fn check_maps(maps: &[AttentionMap]) -> Result<usize> {
    let first = maps
        .first()
        .ok_or_else(|| invalid("entropy loss needs at least one attention map"))?;
    let r = first.size();
    for m in maps {
        if m.size() != r {
            return Err(invalid("attention maps must share one size"));
        }
        for (row, values) in m.probs().rows().into_iter().enumerate() {
            let sum = values.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::NotStochastic { row, sum });
            }
        }
    }
    Ok(r)
}

#[derive(Default)]
struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Constants of the threshold rule and the monitored layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub mean_coeff: f64,
    pub std_coeff: f64,
    /// Attention block index (0-based) whose maps feed the indicator.
    pub shallow_layer: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            mean_coeff: 0.3,
            std_coeff: 0.1,
            shallow_layer: 0,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.mean_coeff.is_finite() && self.std_coeff.is_finite()) {
            return Err(Error::NonFinite("threshold coefficients"));
        }
        if self.shallow_layer + 1 >= depth {
            return Err(Error::LayerOutOfRange {
                index: self.shallow_layer,
                depth,
            });
        }
        Ok(())
    }
}

/// `-entropy_loss` of `layer`'s maps: the mean row entropy in nats, in `[0, log R]`.
pub fn entropy_indicator_at(out: &ModelOutput, layer: usize) -> Result<f64> {
    let maps = out.attn.get(layer).ok_or(Error::LayerOutOfRange {
        index: layer,
        depth: out.attn.len(),
    })?;
    Ok(-entropy_loss(maps)?)
}

pub fn shallow_entropy_indicator(out: &ModelOutput, cfg: &ThresholdConfig) -> Result<f64> {
    entropy_indicator_at(out, cfg.shallow_layer)
}

/// Summary of shallow indicators over a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub mean_indicator: f64,
    /// Unbiased (n-1) standard deviation.
    pub std_indicator: f64,
    pub sample_count: usize,
    pub layer_index: usize,
}

impl EntropyStats {
    pub fn new(mean: f64, std: f64, count: usize, layer: usize) -> Result<Self> {
        if !(mean.is_finite() && std.is_finite()) {
            return Err(Error::NonFinite("entropy statistics"));
        }
        if std < 0.0 {
            return Err(invalid("indicator std must be >= 0"));
        }
        if count < 2 {
            return Err(invalid("entropy statistics need at least 2 samples"));
        }
        Ok(Self {
            mean_indicator: mean,
            std_indicator: std,
            sample_count: count,
            layer_index: layer,
        })
    }
}

/// Streaming mean/variance (Welford) with an order-insensitive merge.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IndicatorAccumulator {
    count: usize,
    mean: f64,
    m2: f64,
}

impl IndicatorAccumulator {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self, layer: usize) -> Result<EntropyStats> {
        if self.count < 2 {
            return Err(invalid("entropy statistics need at least 2 samples"));
        }
        let var = (self.m2 / (self.count - 1) as f64).max(0.0);
        EntropyStats::new(self.mean, var.sqrt(), self.count, layer)
    }
}

/// `mean_coeff·E[H] − std_coeff·std(H)`.
pub fn calibrate_threshold(stats: &EntropyStats, cfg: &ThresholdConfig) -> f64 {
    cfg.mean_coeff * stats.mean_indicator - cfg.std_coeff * stats.std_indicator
}

/// True when speculation should stop: `indicator < tau`, strictly.
pub fn early_stop_check(indicator: f64, tau: f64) -> bool {
    indicator < tau
}

/// One indicator per generation step: for every sequence and every prefix
/// of length `2..=len`, the shallow indicator of `model` on that prefix.
pub fn collect_indicators<M: ArModel + ?Sized>(
    model: &M,
    sequences: &[(Vec<LatentToken>, LatentToken)],
    cfg: &ThresholdConfig,
) -> Result<IndicatorAccumulator> {
    cfg.validate(model.depth())?;
    let mut acc = IndicatorAccumulator::default();
    for (seq, cond) in sequences {
        for len in 2..=seq.len() {
            let out = model.forward(&seq[..len], cond)?;
            acc.push(shallow_entropy_indicator(&out, cfg)?);
        }
    }
    Ok(acc)
}

/// Calibration output consumed by the engine and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub tau: f64,
    pub mean_indicator: f64,
    pub std_indicator: f64,
    pub sample_count: usize,
    pub shallow_layer: usize,
    pub coefficients: Coefficients,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub mean: f64,
    pub std: f64,
}

impl CalibrationRecord {
    pub fn new(stats: &EntropyStats, cfg: &ThresholdConfig) -> Self {
        Self {
            tau: calibrate_threshold(stats, cfg),
            mean_indicator: stats.mean_indicator,
            std_indicator: stats.std_indicator,
            sample_count: stats.sample_count,
            shallow_layer: stats.layer_index,
            coefficients: Coefficients {
                mean: cfg.mean_coeff,
                std: cfg.std_coeff,
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
