//! Independent reference computations used to check the engine.

use cspd_core::GaussianParams;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("oracle is 1-D only, got dimension {0}")]
    Dimension(usize),
    #[error("{0} sample is empty")]
    Empty(&'static str),
    #[error("samples have different dimensions: {0} vs {1}")]
    Mismatch(usize, usize),
    #[error("adaptive quadrature did not reach tolerance on [{lo}, {hi}]")]
    NoConvergence { lo: f64, hi: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type OracleResult<T> = Result<T, OracleError>;

const SIMPSON_TOL: f64 = 1e-12;
const SIMPSON_DEPTH: u32 = 60;

fn density(p: &GaussianParams) -> impl Fn(f64) -> f64 + '_ {
    let (m, v) = (p.mean()[0], p.var()[0]);
    let c = 1.0 / (2.0 * std::f64::consts::PI * v).sqrt();
    move |x| c * (-(x - m).powi(2) / (2.0 * v)).exp()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> OracleResult<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(OracleError::NoConvergence { lo: a, hi: b });
    }
    Ok(adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> OracleResult<f64> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(OracleError::Invalid(format!("bad interval [{a}, {b}]")));
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, SIMPSON_DEPTH)
}

/// Points where two 1-D Gaussian densities cross.
fn crossings(p: &GaussianParams, q: &GaussianParams) -> Vec<f64> {
    let (m1, v1, m2, v2) = (p.mean()[0], p.var()[0], q.mean()[0], q.var()[0]);
    // log p = log q  ⇔  a x² + b x + c = 0
    let a = 0.5 / v2 - 0.5 / v1;
    let b = m1 / v1 - m2 / v2;
    let c = m2 * m2 / (2.0 * v2) - m1 * m1 / (2.0 * v1) + 0.5 * (v2 / v1).ln();
    if a.abs() < 1e-300 {
        if b.abs() < 1e-300 {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    let mut roots = vec![(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)];
    roots.sort_by(f64::total_cmp);
    roots
}

/// `∫ min(p(x), q(x)) dx` for 1-D Gaussians: the probability that a draft
/// token from `q` is accepted against target `p`.
///
/// The integrand is split at the density crossings and each smooth piece is
/// integrated adaptively on `mean ± 40σ`.
pub fn expected_acceptance_oracle(p: &GaussianParams, q: &GaussianParams) -> OracleResult<f64> {
    for g in [p, q] {
        if g.dim() != 1 {
            return Err(OracleError::Dimension(g.dim()));
        }
    }
    if p == q {
        return Ok(1.0);
    }
    let span = |g: &GaussianParams| {
        let s = 40.0 * g.var()[0].sqrt();
        (g.mean()[0] - s, g.mean()[0] + s)
    };
    let (lo_p, hi_p) = span(p);
    let (lo_q, hi_q) = span(q);
    let (lo, hi) = (lo_p.min(lo_q), hi_p.max(hi_q));
    let (fp, fq) = (density(p), density(q));
    let f = move |x: f64| fp(x).min(fq(x));
    let mut cuts = vec![lo];
    cuts.extend(crossings(p, q).into_iter().filter(|x| *x > lo && *x < hi));
    cuts.push(hi);
    // split further at the means so each piece sees its peak
    for m in [p.mean()[0], q.mean()[0]] {
        if m > lo && m < hi {
            cuts.push(m);
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let tol = SIMPSON_TOL / cuts.len() as f64;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += integrate(&f, w[0], w[1], tol)?;
    }
    Ok(total)
}

/// Two-sample Kolmogorov-Smirnov distance of 1-D samples.
pub fn ks_1d(a: &[f64], b: &[f64]) -> OracleResult<f64> {
    if a.is_empty() {
        return Err(OracleError::Empty("first"));
    }
    if b.is_empty() {
        return Err(OracleError::Empty("second"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut worst: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        worst = worst.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(worst)
}

/// Per-coordinate two-sample KS distance, maximised over coordinates.
pub fn ks_statistic(a: &[Vec<f64>], b: &[Vec<f64>]) -> OracleResult<f64> {
    let first = a.first().ok_or(OracleError::Empty("first"))?;
    let other = b.first().ok_or(OracleError::Empty("second"))?;
    let d = first.len();
    if other.len() != d {
        return Err(OracleError::Mismatch(d, other.len()));
    }
    if let Some(bad) = a.iter().chain(b).find(|x| x.len() != d) {
        return Err(OracleError::Mismatch(d, bad.len()));
    }
    let mut worst: f64 = 0.0;
    for k in 0..d {
        let ca: Vec<f64> = a.iter().map(|x| x[k]).collect();
        let cb: Vec<f64> = b.iter().map(|x| x[k]).collect();
        worst = worst.max(ks_1d(&ca, &cb)?);
    }
    Ok(worst)
}

/// Asymptotic two-sample KS critical value at level `alpha`.
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let (n, m) = (n as f64, m as f64);
    (-(alpha / 2.0).ln() / 2.0).sqrt() * ((n + m) / (n * m)).sqrt()
}

/// Total-variation distance between the histogram of `samples` and a
/// density known up to normalisation, on `bins` equal-width bins spanning
/// `[lo, hi]`. Samples outside the range count towards the edge bins, and the
/// density's mass outside is folded in the same way.
pub fn histogram_tv(
    samples: &[f64],
    density: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    tails: (f64, f64),
    bins: usize,
) -> OracleResult<f64> {
    if samples.is_empty() {
        return Err(OracleError::Empty("sample"));
    }
    if bins == 0 || !(lo < hi) || !(tails.0 <= lo && hi <= tails.1) {
        return Err(OracleError::Invalid("histogram range".into()));
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |x: f64| (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1);
    let mut counts = vec![0usize; bins];
    for &x in samples {
        counts[bin_of(x)] += 1;
    }
    let mut mass = vec![0.0; bins];
    for (k, m) in mass.iter_mut().enumerate() {
        let a = if k == 0 {
            tails.0
        } else {
            lo + k as f64 * width
        };
        let b = if k + 1 == bins {
            tails.1
        } else {
            lo + (k + 1) as f64 * width
        };
        *m = integrate(density, a, b, 1e-12)?;
    }
    let z: f64 = mass.iter().sum();
    if !(z > 0.0) {
        return Err(OracleError::Invalid(
            "density has no mass on the range".into(),
        ));
    }
    let n = samples.len() as f64;
    Ok(0.5
        * counts
            .iter()
            .zip(&mass)
            .map(|(&c, m)| (c as f64 / n - m / z).abs())
            .sum::<f64>())
}

/// Counts on `bins` uniform bins over `[lo, hi]`; values outside are clamped
/// into the edge bins so counts always sum to the sample size.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    if bins == 0 || !(hi > lo) {
        return counts;
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let k = ((v - lo) / width).floor();
        let k = if k.is_nan() {
            0
        } else {
            (k.max(0.0) as usize).min(bins - 1)
        };
        counts[k] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn g(m: f64, v: f64) -> GaussianParams {
        GaussianParams::new(vec![m], vec![v]).unwrap()
    }

    fn phi(x: f64) -> f64 {
        Normal::new(0.0, 1.0).unwrap().cdf(x)
    }

    #[test]
    fn acceptance_equal_variance_closed_form() {
        for mu in [0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0] {
            let got = expected_acceptance_oracle(&g(0.0, 1.0), &g(mu, 1.0)).unwrap();
            assert!((got - 2.0 * phi(-mu / 2.0)).abs() < 1e-9, "{mu}: {got}");
        }
        let got = expected_acceptance_oracle(&g(0.0, 1.0), &g(0.5, 1.0)).unwrap();
        assert!((got - 0.8026).abs() < 5e-5);
        let far = expected_acceptance_oracle(&g(0.0, 1.0), &g(5.0, 1.0)).unwrap();
        assert!((far - 0.0124).abs() < 5e-5);
    }

    #[test]
    fn acceptance_unequal_variance_matches_cdf_form() {
        // N(0,1) vs N(0,4) cross at ±c with c² = 8 ln 2 / 3; the wide one is
        // smaller inside
        let c = (8.0 * 2f64.ln() / 3.0).sqrt();
        let exact = (2.0 * phi(c / 2.0) - 1.0) + 2.0 * phi(-c);
        let got = expected_acceptance_oracle(&g(0.0, 1.0), &g(0.0, 4.0)).unwrap();
        assert!((got - exact).abs() < 1e-9, "{got} vs {exact}");
        assert_eq!(
            expected_acceptance_oracle(&g(0.3, 2.0), &g(0.3, 2.0)).unwrap(),
            1.0
        );
    }

    #[test]
    fn acceptance_rejects_multivariate() {
        let p = GaussianParams::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(
            expected_acceptance_oracle(&p, &p),
            Err(OracleError::Dimension(2))
        );
    }

    #[test]
    fn ks_basics() {
        let a = vec![vec![0.1], vec![0.5], vec![-0.3]];
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_1d(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(ks_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 0.5);
        assert!(ks_statistic(&[], &a).is_err());
        assert!(ks_statistic(&a, &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn ks_ties_are_grouped() {
        assert_eq!(ks_1d(&[1.0, 1.0, 1.0], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn histogram_conserves_counts() {
        let v = [-5.0, 0.0, 0.3, 0.99, 1.0, 7.0, f64::NAN];
        let h = histogram(&v, 0.0, 1.0, 4);
        assert_eq!(h.iter().sum::<usize>(), v.len());
        assert_eq!(h, vec![3, 1, 0, 3]);
    }

    #[test]
    fn tv_of_exact_quantiles_is_small() {
        let n = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..20_000)
            .map(|i| n.inverse_cdf((i as f64 + 0.5) / 20_000.0))
            .collect();
        let pdf = |x: f64| (-0.5 * x * x).exp();
        let tv = histogram_tv(&xs, &pdf, -4.0, 4.0, (-12.0, 12.0), 32).unwrap();
        assert!(tv < 1e-3, "{tv}");
    }
}
