use crate::error::{check_dim, Error, Result};

const STEP: f64 = 1e-5;
const MAX_COORDS: usize = 64;

/// Coordinates probed for a parameter vector of length `n`: all of them up
/// to 64, otherwise 64 evenly strided indices.
pub fn probe_coordinates(n: usize) -> Vec<usize> {
    if n <= MAX_COORDS {
        return (0..n).collect();
    }
    (0..MAX_COORDS).map(|k| k * n / MAX_COORDS).collect()
}

/// Largest relative error between `grad` and central differences of `loss`
/// (step 1e-5) over the probed coordinates of `params`.
///
/// Relative error is `|fd − g| / max(|fd|, |g|, 1e-6)`, so coordinates whose
/// gradient vanishes are compared absolutely.
pub fn grad_check<F>(loss: F, grad: &[f64], params: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    check_dim(params.len(), grad.len())?;
    if !loss(params)?.is_finite() {
        return Err(Error::NonFinite("loss at the probe point"));
    }
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in probe_coordinates(params.len()) {
        let orig = p[i];
        p[i] = orig + STEP;
        let up = loss(&p)?;
        p[i] = orig - STEP;
        let down = loss(&p)?;
        p[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("loss in the probe neighbourhood"));
        }
        let fd = (up - down) / (2.0 * STEP);
        let denom = fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max((fd - grad[i]).abs() / denom);
    }
    Ok(worst)
}
