use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};

use super::{GaussianHead, Params};
use crate::error::{check_dim, invalid, Error, Result};
use crate::latent::{GaussianParams, LatentToken, NoiseSchedule, RandomSource};

pub const TIME_EMBED_DIM: usize = 4;

/// Sinusoidal embedding of a continuous step `t ∈ [0, T]`.
pub fn time_embedding(t: f64, total: usize) -> [f64; TIME_EMBED_DIM] {
    let s = t / total.max(1) as f64;
    [
        (PI * s).sin(),
        (PI * s).cos(),
        (2.0 * PI * s).sin(),
        (2.0 * PI * s).cos(),
    ]
}

/// Exact `E[x0 | x_t]` when `x0 ~ N(mean, var)` and `x_t = √ᾱ x0 + √(1-ᾱ) ε`.
pub fn gaussian_x0_prediction(x: &[f64], alpha_bar: f64, mean: &[f64], var: &[f64]) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| {
            let denom = alpha_bar * v + 1.0 - alpha_bar;
            if denom <= 0.0 {
                return *x;
            }
            m + a * v / denom * (x - a * m)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    Teacher,
    Student,
}

/// Small feed-forward denoiser predicting `x0` from `(x_t, t, z)`:
///
/// `x̂0 = √ᾱ_t·x + √(1-ᾱ_t)·(W2 tanh(W1 [x; emb(t); z] + b1) + b2 + g ⊙ x)`
///
/// so that `x̂0 = x` at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDenoiser {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub gain: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub gain: Array1<f64>,
}

/// Values kept from [`MlpDenoiser::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    x: Vec<f64>,
    input: Array1<f64>,
    hidden: Array1<f64>,
    skip: f64,
    out_scale: f64,
}

impl MlpDenoiser {
    pub fn random(
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(invalid("denoiser dimensions must be >= 1"));
        }
        let fan_in = dim + TIME_EMBED_DIM + cond_dim;
        let s1 = 1.0 / (fan_in as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w1: Array2::from_shape_fn((hidden, fan_in), |_| s1 * rng.normal()),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_fn((dim, hidden), |_| s2 * rng.normal()),
            b2: Array1::zeros(dim),
            gain: Array1::zeros(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.b2.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.w1.ncols() - self.dim() - TIME_EMBED_DIM
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn forward(
        &self,
        x: &[f64],
        t: f64,
        z: &[f64],
        sched: &NoiseSchedule,
    ) -> Result<(Vec<f64>, MlpTrace)> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.cond_dim(), z.len())?;
        let ab = sched.alpha_bar_at(t)?;
        let emb = time_embedding(t, sched.steps());
        let input: Array1<f64> = x.iter().chain(emb.iter()).chain(z).copied().collect();
        let hidden = (self.w1.dot(&input) + &self.b1).mapv(f64::tanh);
        let inner = self.w2.dot(&hidden) + &self.b2 + &self.gain * &ArrayView1::from(x);
        let skip = ab.sqrt();
        let out_scale = (1.0 - ab).max(0.0).sqrt();
        let out: Vec<f64> = x
            .iter()
            .zip(inner.iter())
            .map(|(xi, f)| skip * xi + out_scale * f)
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output"));
        }
        Ok((
            out,
            MlpTrace {
                x: x.to_vec(),
                input,
                hidden,
                skip,
                out_scale,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream `d_out` into `grads` and
    /// returns `(dL/dx, dL/dz)`.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        d_out: &[f64],
        grads: &mut MlpGrads,
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let d_inner = Array1::from_iter(d_out.iter().map(|g| g * trace.out_scale));
        grads.b2 += &d_inner;
        grads.gain += &(&d_inner * &ArrayView1::from(&trace.x[..]));
        for i in 0..d {
            for j in 0..self.hidden() {
                grads.w2[[i, j]] += d_inner[i] * trace.hidden[j];
            }
        }
        let d_hidden = self.w2.t().dot(&d_inner);
        let d_pre = &d_hidden * &trace.hidden.mapv(|h| 1.0 - h * h);
        grads.b1 += &d_pre;
        for i in 0..self.hidden() {
            for j in 0..trace.input.len() {
                grads.w1[[i, j]] += d_pre[i] * trace.input[j];
            }
        }
        let d_input = self.w1.t().dot(&d_pre);
        let dx: Vec<f64> = (0..d)
            .map(|k| d_out[k] * trace.skip + d_inner[k] * self.gain[k] + d_input[k])
            .collect();
        let dz = d_input.iter().skip(d + TIME_EMBED_DIM).copied().collect();
        (dx, dz)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
            gain: Array1::zeros(self.gain.len()),
        }
    }
}

impl MlpGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .chain(self.gain.iter())
            .copied()
            .collect()
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, factor: f64) {
        self.w1.scaled_add(factor, &other.w1);
        self.b1.scaled_add(factor, &other.b1);
        self.w2.scaled_add(factor, &other.w2);
        self.b2.scaled_add(factor, &other.b2);
        self.gain.scaled_add(factor, &other.gain);
    }

    pub fn scale(&mut self, factor: f64) {
        for a in [&mut self.b1, &mut self.b2, &mut self.gain] {
            a.mapv_inplace(|v| v * factor);
        }
        self.w1.mapv_inplace(|v| v * factor);
        self.w2.mapv_inplace(|v| v * factor);
    }
}

impl Params for MlpDenoiser {
    fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.gain.len()
    }

    fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .chain(self.gain.iter())
            .copied()
            .collect()
    }

    fn assign(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.num_params(), flat.len())?;
        let mut it = flat.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.gain.iter_mut())
        {
            *v = it.next().unwrap_or_default();
        }
        Ok(())
    }
}

/// What a diffusion head uses to predict `x0`.
#[derive(Clone, Debug, PartialEq)]
pub enum Denoiser {
    /// Exact posterior mean for data `N(mean, var)`; `var = 0` is a point mass.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
    /// Exact posterior mean for data `N(head(z))`.
    Conditional(GaussianHead),
    /// Learned network.
    Network(MlpDenoiser),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionHead {
    pub mode: HeadMode,
    pub denoiser: Denoiser,
}

impl DiffusionHead {
    pub fn teacher(denoiser: Denoiser) -> Self {
        Self {
            mode: HeadMode::Teacher,
            denoiser,
        }
    }

    pub fn student(net: MlpDenoiser) -> Self {
        Self {
            mode: HeadMode::Student,
            denoiser: Denoiser::Network(net),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.denoiser {
            Denoiser::Fixed { mean, .. } => mean.len(),
            Denoiser::Conditional(h) => h.dim(),
            Denoiser::Network(n) => n.dim(),
        }
    }

    pub fn network(&self) -> Option<&MlpDenoiser> {
        match &self.denoiser {
            Denoiser::Network(n) => Some(n),
            _ => None,
        }
    }

    pub fn network_mut(&mut self) -> Option<&mut MlpDenoiser> {
        match &mut self.denoiser {
            Denoiser::Network(n) => Some(n),
            _ => None,
        }
    }

    /// Prediction of the clean latent at continuous time `t`.
    pub fn predict_x0(
        &self,
        x: &[f64],
        t: f64,
        z: &[f64],
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        match &self.denoiser {
            Denoiser::Fixed { mean, var } => {
                Ok(gaussian_x0_prediction(x, sched.alpha_bar_at(t)?, mean, var))
            }
            Denoiser::Conditional(head) => {
                let p = head.apply(z)?;
                Ok(gaussian_x0_prediction(
                    x,
                    sched.alpha_bar_at(t)?,
                    p.mean(),
                    p.var(),
                ))
            }
            Denoiser::Network(net) => net.forward(x, t, z, sched).map(|(out, _)| out),
        }
    }

    /// Score `∇ log p_t(x)` implied by the x0 prediction, for `t > 0`.
    pub fn score(&self, x: &[f64], t: f64, z: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let ab = sched.alpha_bar_at(t)?;
        if ab >= 1.0 {
            return Err(invalid("score is undefined at t = 0"));
        }
        let x0 = self.predict_x0(x, t, z, sched)?;
        let a = ab.sqrt();
        Ok(x.iter()
            .zip(&x0)
            .map(|(x, p)| -(x - a * p) / (1.0 - ab))
            .collect())
    }
}

/// One ancestral denoising step `x_t → x_{t-1}` driven by the noise `eps`.
///
/// The transition mean is the DDPM posterior mean given the head's `x0`
/// prediction; the variance is `β_t` from the schedule and never depends on
/// `x_t`. Returns the new latent and the transition Gaussian.
pub fn denoise_step(
    head: &DiffusionHead,
    x_t: &LatentToken,
    t: usize,
    z: &[f64],
    sched: &NoiseSchedule,
    eps: &[f64],
) -> Result<(LatentToken, GaussianParams)> {
    sched.check_step(t)?;
    check_dim(x_t.dim(), eps.len())?;
    let x0 = head.predict_x0(x_t.as_slice(), t as f64, z, sched)?;
    let beta = sched.beta(t)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let mean: Vec<f64> = x0
        .iter()
        .zip(x_t.as_slice())
        .map(|(p, x)| c0 * p + ct * x)
        .collect();
    let dist = GaussianParams::isotropic(mean, beta)?;
    let next = crate::latent::gaussian_from_noise(&dist, eps);
    Ok((next, dist))
}
