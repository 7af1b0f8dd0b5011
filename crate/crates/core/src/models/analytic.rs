use super::{ArModel, ModelOutput};
use crate::error::{check_dim, invalid, Result};
use crate::latent::{AttentionMap, GaussianParams, LatentToken};

/// Oracle model whose next-token distribution ignores the context.
///
/// Its attention maps are uniform by construction, so its entropy indicator
/// is always `log R`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussianModel {
    params: GaussianParams,
    depth: usize,
}

impl AnalyticGaussianModel {
    pub fn new(params: GaussianParams) -> Self {
        Self { params, depth: 2 }
    }

    pub fn from_moments(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        GaussianParams::new(mean, var).map(Self::new)
    }

    pub fn with_depth(mut self, depth: usize) -> Result<Self> {
        if depth < 2 {
            return Err(invalid("model depth must be >= 2"));
        }
        self.depth = depth;
        Ok(self)
    }

    pub fn params(&self) -> &GaussianParams {
        &self.params
    }
}

impl ArModel for AnalyticGaussianModel {
    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn depth(&self) -> usize {
        self.depth
    }

    fn forward(&self, ctx: &[LatentToken], condition: &LatentToken) -> Result<ModelOutput> {
        if ctx.is_empty() {
            return Err(invalid("context must contain at least the start token"));
        }
        check_dim(self.dim(), condition.dim())?;
        for tok in ctx {
            check_dim(self.dim(), tok.dim())?;
        }
        let r = ctx.len();
        Ok(ModelOutput {
            feature: self.params.mean().to_vec(),
            attn: vec![vec![AttentionMap::uniform(r)]; self.depth],
            next_dist: self.params.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_independent() {
        let m = AnalyticGaussianModel::from_moments(vec![0.5], vec![1.0]).unwrap();
        let z = LatentToken::zeros(1);
        let short = m.forward(&[z.clone()], &z).unwrap();
        let long_ctx: Vec<LatentToken> = (0..9)
            .map(|i| LatentToken::new(vec![i as f64]).unwrap())
            .collect();
        let long = m.forward(&long_ctx, &z).unwrap();
        assert_eq!(short.next_dist, long.next_dist);
        assert_eq!(long.attn[0][0], AttentionMap::uniform(9));
    }

    #[test]
    fn density_ratio_at_zero() {
        let p = AnalyticGaussianModel::from_moments(vec![0.0], vec![1.0]).unwrap();
        let q = AnalyticGaussianModel::from_moments(vec![0.5], vec![1.0]).unwrap();
        let x = [0.0];
        let ratio =
            (p.params().log_density(&x).unwrap() - q.params().log_density(&x).unwrap()).exp();
        assert!((ratio - 0.125f64.exp()).abs() < 1e-12);
        assert!((ratio - 1.1331).abs() < 1e-4);
    }
}
