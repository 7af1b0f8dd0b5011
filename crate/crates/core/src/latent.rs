//! Numeric primitives shared by the engine, the toy models and the trainer:
//! latent tokens, diagonal Gaussians, the VP noise schedule, seeded random
//! substreams, the Smooth-L1 distance and row softmax.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

/// A continuous latent vector: one generated element of a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentToken(Vec<f64>);

impl LatentToken {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("latent token must have dimension >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent token"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for LatentToken {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Diagonal Gaussian: mean vector and per-coordinate variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), var.len())?;
        if mean.is_empty() {
            return Err(invalid("gaussian must have dimension >= 1"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("gaussian mean"));
        }
        for (index, &value) in var.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidVariance { index, value });
            }
        }
        Ok(Self { mean, var })
    }

    /// Isotropic Gaussian with the same variance on every coordinate.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![var; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// Same mean, variances multiplied by `factor`.
    pub fn with_var_scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.mean.clone(),
            self.var.iter().map(|v| v * factor).collect(),
        )
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(log_density_unchecked(x, &self.mean, &self.var))
    }
}

fn log_density_unchecked(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (2.0 * PI * v).ln() - (x - m) * (x - m) / (2.0 * v))
        .sum()
}

/// Log density of a diagonal Gaussian at `x`, in nats.
pub fn gaussian_log_density(x: &LatentToken, params: &GaussianParams) -> Result<f64> {
    params.log_density(x.as_slice())
}

/// Draws `mean + sqrt(var) * eps` with standard-normal `eps` from `rng`.
pub fn sample_gaussian(params: &GaussianParams, rng: &mut RandomSource) -> LatentToken {
    let eps = rng.normal_vec(params.dim());
    gaussian_from_noise(params, &eps)
}

/// Deterministic reparameterised draw from a fixed noise vector.
pub fn gaussian_from_noise(params: &GaussianParams, eps: &[f64]) -> LatentToken {
    LatentToken(
        params
            .mean
            .iter()
            .zip(&params.var)
            .zip(eps)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect(),
    )
}

/// Variance-preserving noise schedule with betas `β_1..β_T` and cumulative
/// products `ᾱ_t = ∏_{s≤t}(1-β_s)`, `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("noise schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alphas_bar = Vec::with_capacity(betas.len() + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        Ok(Self { betas, alphas_bar })
    }

    /// Betas spaced linearly from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("noise schedule needs at least one step"));
        }
        let betas = if steps == 1 {
            vec![start]
        } else {
            (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// The default linear schedule, 1e-4 to 0.02.
    pub fn default_linear(steps: usize) -> Result<Self> {
        Self::linear(steps, 1e-4, 0.02)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t.min(self.steps())]
    }

    /// `ᾱ` at a continuous time `t ∈ [0, T]`; `log ᾱ` is linear between steps.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let lo = t.floor() as usize;
        if lo >= self.steps() {
            return Ok(self.alphas_bar[self.steps()]);
        }
        let frac = t - lo as f64;
        let log_lo = self.alphas_bar[lo].ln();
        Ok((log_lo + frac * (1.0 - self.betas[lo]).ln()).exp())
    }

    /// Instantaneous rate `-d log ᾱ / dt` on the segment containing `t`.
    pub fn beta_rate_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let seg = (t.ceil() as usize).clamp(1, self.steps());
        Ok(-(1.0 - self.betas[seg - 1]).ln())
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t: t as f64,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<()> {
        if !(t.is_finite() && t >= 0.0 && t <= self.steps() as f64) {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·eps` for `1 ≤ t ≤ T`.
pub fn forward_diffuse(
    x0: &LatentToken,
    t: usize,
    sched: &NoiseSchedule,
    eps: &LatentToken,
) -> Result<LatentToken> {
    sched.check_step(t)?;
    forward_diffuse_with(x0.as_slice(), sched.alpha_bar(t), eps.as_slice()).map(LatentToken)
}

/// Forward corruption for an explicit `ᾱ`.
pub fn forward_diffuse_with(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_dim(x0.len(), eps.len())?;
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).max(0.0).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Mean Smooth-L1 distance between `a` and `b` with transition point `beta`.
pub fn smooth_l1(a: &[f64], b: &[f64], beta: f64) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    if !(beta > 0.0) {
        return Err(invalid("smooth_l1 beta must be > 0"));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let e = (x - y).abs();
            if e < beta {
                0.5 * e * e / beta
            } else {
                e - 0.5 * beta
            }
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`smooth_l1`] with respect to `a`.
pub fn smooth_l1_grad(a: &[f64], b: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_dim(a.len(), b.len())?;
    let n = a.len().max(1) as f64;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            let e = x - y;
            let g = if e.abs() < beta { e / beta } else { e.signum() };
            g / n
        })
        .collect())
}

/// A row-stochastic square attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Array2<f64>);

impl AttentionMap {
    /// Wraps `probs` after checking it is square with rows summing to 1 (tol 1e-6).
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let (r, c) = probs.dim();
        if r != c || r == 0 {
            return Err(invalid(format!(
                "attention map must be square, got {r}x{c}"
            )));
        }
        for (row, values) in probs.rows().into_iter().enumerate() {
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::NonFinite("attention map"));
            }
            let sum = values.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::NotStochastic { row, sum });
            }
        }
        Ok(Self(probs))
    }

    pub fn uniform(size: usize) -> Self {
        Self(Array2::from_elem((size, size), 1.0 / size as f64))
    }

    pub(crate) fn from_softmax(probs: Array2<f64>) -> Self {
        Self(probs)
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Result<AttentionMap> {
    let (r, c) = logits.dim();
    if r != c || r == 0 {
        return Err(invalid(format!("logits must be square, got {r}x{c}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention logits"));
    }
    Ok(AttentionMap(softmax_rows_unchecked(logits)))
}

pub(crate) fn softmax_rows_unchecked(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Seeded, splittable random source.
///
/// Every source is a ChaCha8 stream addressed by `(seed, stream id)`. Named
/// substreams derive their stream id from the parent id and the name, so the
/// same name always yields the same sequence and distinct names yield
/// independent ones.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Fresh source for `name`, independent of this source's position.
    pub fn substream(&self, name: &str) -> Self {
        Self::with_stream(self.seed, mix(self.stream, fnv1a(name.as_bytes())))
    }

    /// Fresh source for `name` at integer coordinates `index`.
    pub fn substream_at(&self, name: &str, index: &[u64]) -> Self {
        let mut id = mix(self.stream, fnv1a(name.as_bytes()));
        for &i in index {
            id = mix(id, i);
        }
        Self::with_stream(self.seed, id)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.normal()).collect()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a
        .rotate_left(17)
        .wrapping_add(b)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tok(v: &[f64]) -> LatentToken {
        LatentToken::new(v.to_vec()).unwrap()
    }

    #[test]
    fn log_density_standard_normal() {
        let p = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        let at0 = gaussian_log_density(&tok(&[0.0]), &p).unwrap();
        let at1 = gaussian_log_density(&tok(&[1.0]), &p).unwrap();
        assert!((at0 - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        assert!((at1 - (-1.418_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn log_density_matches_scalar_product_oracle() {
        // oracle: ln of the product of 1-D densities
        let pdf =
            |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
        let oracle = (pdf(0.5, 0.0, 2.0) * pdf(-0.5, 0.0, 2.0)).ln();
        let p = GaussianParams::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let got = gaussian_log_density(&tok(&[0.5, -0.5]), &p).unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn log_density_dimension_mismatch() {
        let p = GaussianParams::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            gaussian_log_density(&tok(&[0.0]), &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_variance_rejected() {
        assert!(matches!(
            GaussianParams::new(vec![0.0], vec![0.0]),
            Err(Error::InvalidVariance { .. })
        ));
        assert!(GaussianParams::new(vec![0.0], vec![-1.0]).is_err());
        assert!(GaussianParams::new(vec![0.0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = GaussianParams::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        let a = sample_gaussian(&p, &mut RandomSource::new(11).substream("x"));
        let b = sample_gaussian(&p, &mut RandomSource::new(11).substream("x"));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_moments() {
        let p = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        let mut rng = RandomSource::new(2024);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_gaussian(&p, &mut rng).as_slice()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn forward_diffuse_examples() {
        let sched = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let out = forward_diffuse(&tok(&[1.0]), 1, &sched, &tok(&[1.0])).unwrap();
        assert!((out.as_slice()[0] - 1.4).abs() < 1e-12);

        // ᾱ = 1 leaves x0 untouched, ᾱ = 0 returns the noise
        assert_eq!(
            forward_diffuse_with(&[0.7], 1.0, &[3.0]).unwrap(),
            vec![0.7]
        );
        assert_eq!(
            forward_diffuse_with(&[0.7], 0.0, &[3.0]).unwrap(),
            vec![3.0]
        );

        assert!(matches!(
            forward_diffuse(&tok(&[1.0]), 2, &sched, &tok(&[1.0])),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(forward_diffuse(&tok(&[1.0]), 0, &sched, &tok(&[1.0])).is_err());
    }

    #[test]
    fn forward_diffuse_marginal() {
        let sched = NoiseSchedule::default_linear(100).unwrap();
        let t = 60;
        let ab = sched.alpha_bar(t);
        let x0 = tok(&[1.5]);
        let mut rng = RandomSource::new(5);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e = tok(&[rng.normal()]);
                forward_diffuse(&x0, t, &sched, &e).unwrap().as_slice()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = (1.0 - ab).sqrt();
        // 5 standard errors
        assert!((mean - ab.sqrt() * 1.5).abs() < 5.0 * sd / (n as f64).sqrt());
        assert!((var - (1.0 - ab)).abs() < 5.0 * (1.0 - ab) * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::default_linear(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!((s.alpha_bar_at(10.0).unwrap() - s.alpha_bar(10)).abs() < 1e-15);
        let mid = s.alpha_bar_at(10.5).unwrap();
        assert!(mid < s.alpha_bar(10) && mid > s.alpha_bar(11));
        assert!(s.alpha_bar_at(1000.5).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[2.0], &[0.0], 1.0).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
        assert!(smooth_l1(&[0.5], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let m = softmax_rows(&Array2::zeros((3, 3))).unwrap();
        for v in m.probs().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut logits = Array2::zeros((3, 3));
        logits[[1, 2]] = 1000.0;
        let m = softmax_rows(&logits).unwrap();
        assert!((m.probs()[[1, 2]] - 1.0).abs() < 1e-9);
        assert!(m.probs()[[1, 0]] < 1e-9);

        let mut bad = Array2::zeros((2, 2));
        bad[[0, 0]] = f64::NAN;
        assert!(softmax_rows(&bad).is_err());
    }

    #[test]
    fn softmax_matches_compensated_oracle() {
        // oracle: plain exponentiation (no max shift) with Neumaier summation
        let mut rng = RandomSource::new(99);
        let logits = Array2::from_shape_fn((4, 4), |_| 10.0 * rng.uniform() - 5.0);
        let got = softmax_rows(&logits).unwrap();
        for r in 0..4 {
            let exps: Vec<f64> = (0..4).map(|c| logits[[r, c]].exp()).collect();
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for e in &exps {
                let t = sum + e;
                comp += if sum.abs() >= e.abs() {
                    (sum - t) + e
                } else {
                    (e - t) + sum
                };
                sum = t;
            }
            let total = sum + comp;
            for c in 0..4 {
                assert!((got.probs()[[r, c]] - exps[c] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_map_validation() {
        assert!(AttentionMap::new(array![[0.5, 0.5], [1.0, 0.0]]).is_ok());
        assert!(matches!(
            AttentionMap::new(array![[0.5, 0.6], [1.0, 0.0]]),
            Err(Error::NotStochastic { row: 0, .. })
        ));
        assert!(AttentionMap::new(array![[1.0, 0.0]]).is_err());
    }

    #[test]
    fn substreams() {
        let root = RandomSource::new(7);
        let mut a = root.substream("draft");
        let mut a2 = root.substream("draft");
        let mut b = root.substream("target");
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xa2: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xa, xa2);
        assert_ne!(xa, xb);
        let mut i0 = root.substream_at("traj", &[0, 1]);
        let mut i1 = root.substream_at("traj", &[1, 0]);
        assert_ne!(i0.next_u64(), i1.next_u64());
    }

    proptest! {
        #[test]
        fn softmax_row_stochastic_and_shift_invariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 16),
            shifts in proptest::collection::vec(-50.0f64..50.0, 4),
        ) {
            let logits = Array2::from_shape_vec((4, 4), vals).unwrap();
            let a = softmax_rows(&logits).unwrap();
            let mut shifted = logits.clone();
            for (r, s) in shifts.iter().enumerate() {
                shifted.row_mut(r).mapv_inplace(|v| v + s);
            }
            let b = softmax_rows(&shifted).unwrap();
            for r in 0..4 {
                prop_assert!((a.probs().row(r).sum() - 1.0).abs() < 1e-9);
            }
            for (x, y) in a.probs().iter().zip(b.probs().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn log_density_is_sum_of_1d(
            xs in proptest::collection::vec(-5.0f64..5.0, 1..6),
            seed in 0u64..1000,
        ) {
            let mut rng = RandomSource::new(seed);
            let d = xs.len();
            let mean: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let var: Vec<f64> = (0..d).map(|_| 0.1 + 3.0 * rng.uniform()).collect();
            let p = GaussianParams::new(mean.clone(), var.clone()).unwrap();
            let joint = p.log_density(&xs).unwrap();
            let sum: f64 = (0..d)
                .map(|k| GaussianParams::new(vec![mean[k]], vec![var[k]]).unwrap().log_density(&[xs[k]]).unwrap())
                .sum();
            prop_assert!(((joint - sum) / sum.abs().max(1e-300)).abs() < 1e-12);
        }
    }
}
