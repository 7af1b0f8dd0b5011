use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::{ArModel, ModelOutput, Params};
use crate::error::{check_dim, invalid, Error, Result};
use crate::latent::{
    softmax_rows_unchecked, AttentionMap, GaussianParams, LatentToken, RandomSource,
};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

/// Query/key/value projections of one attention head, each `d × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub heads: Vec<HeadWeights>,
}

/// Affine map from a feature to a diagonal Gaussian (mean, clamped log-variance).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub w_mean: Array2<f64>,
    pub b_mean: Array1<f64>,
    pub w_logvar: Array2<f64>,
    pub b_logvar: Array1<f64>,
}

impl GaussianHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_mean: Array2::zeros((dim, dim)),
            b_mean: Array1::zeros(dim),
            w_logvar: Array2::zeros((dim, dim)),
            b_logvar: Array1::zeros(dim),
        }
    }

    /// Context-free head that always returns `N(mean, var)`.
    pub fn constant(mean: &[f64], var: &[f64]) -> Result<Self> {
        check_dim(mean.len(), var.len())?;
        let mut head = Self::zeros(mean.len());
        head.b_mean = Array1::from(mean.to_vec());
        head.b_logvar = var.iter().map(|v| v.ln()).collect();
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.b_mean.len()
    }

    fn raw_logvar(&self, feature: ArrayView1<f64>) -> Array1<f64> {
        self.w_logvar.dot(&feature) + &self.b_logvar
    }

    pub fn apply(&self, feature: &[f64]) -> Result<GaussianParams> {
        check_dim(self.dim(), feature.len())?;
        let f = ArrayView1::from(feature);
        let mean = self.w_mean.dot(&f) + &self.b_mean;
        let var = self
            .raw_logvar(f)
            .mapv(|lv| lv.clamp(LOGVAR_MIN, LOGVAR_MAX).exp());
        GaussianParams::new(mean.to_vec(), var.to_vec())
    }

    /// Backprop from `dL/dmean` and `dL/dlogvar` (post-clamp) into the head
    /// parameters and the feature.
    pub fn backward(
        &self,
        feature: &[f64],
        d_mean: Option<&[f64]>,
        d_logvar: Option<&[f64]>,
        grads: &mut HeadGrads,
    ) -> Vec<f64> {
        let f = ArrayView1::from(feature);
        let mut d_feature = Array1::<f64>::zeros(self.dim());
        if let Some(dm) = d_mean {
            let dm = ArrayView1::from(dm);
            grads.w_mean += &outer(dm, f);
            grads.b_mean += &dm;
            d_feature += &self.w_mean.t().dot(&dm);
        }
        if let Some(dl) = d_logvar {
            let raw = self.raw_logvar(f);
            let masked: Array1<f64> = dl
                .iter()
                .zip(raw.iter())
                .map(|(g, r)| {
                    if (LOGVAR_MIN..=LOGVAR_MAX).contains(r) {
                        *g
                    } else {
                        0.0
                    }
                })
                .collect();
            grads.w_logvar += &outer(masked.view(), f);
            grads.b_logvar += &masked;
            d_feature += &self.w_logvar.t().dot(&masked);
        }
        d_feature.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub w_mean: Array2<f64>,
    pub b_mean: Array1<f64>,
    pub w_logvar: Array2<f64>,
    pub b_logvar: Array1<f64>,
}

impl HeadGrads {
    pub fn zeros(dim: usize) -> Self {
        let z = GaussianHead::zeros(dim);
        Self {
            w_mean: z.w_mean,
            b_mean: z.b_mean,
            w_logvar: z.w_logvar,
            b_logvar: z.b_logvar,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.w_mean
            .iter()
            .chain(self.b_mean.iter())
            .chain(self.w_logvar.iter())
            .chain(self.b_logvar.iter())
            .copied()
            .collect()
    }
}

/// Initialisation scales for [`ToyARModel::random`].
#[derive(Clone, Debug, PartialEq)]
pub struct InitScales {
    /// Std of query/key entries.
    pub qk: f64,
    /// Std of value entries.
    pub v: f64,
    /// Std of the head's mean weights.
    pub head_mean: f64,
    /// Constant log-variance bias of the head.
    pub head_logvar: f64,
}

impl Default for InitScales {
    fn default() -> Self {
        Self {
            qk: 0.3,
            v: 0.2,
            head_mean: 0.3,
            head_logvar: -1.0,
        }
    }
}

/// Stack of residual multi-head attention blocks over continuous tokens,
/// followed by a Gaussian head on the last position's feature.
///
/// Token `i` enters as `x_i + pe(i) + condition`. Each block computes, per
/// head, `A = softmax(Q Kᵀ / √d)` over the full (non-causal) context and adds
/// the head-averaged `A V` to the residual stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyARModel {
    dim: usize,
    pub layers: Vec<AttentionBlock>,
    pub head: GaussianHead,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Residual stream entering each block, plus the final one (`depth + 1` entries).
    pub hidden: Vec<Array2<f64>>,
    heads: Vec<Vec<HeadTrace>>,
}

#[derive(Clone, Debug)]
struct HeadTrace {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
}

/// Upstream gradients fed into [`ToyARModel::backward`].
#[derive(Clone, Debug, Default)]
pub struct BackwardSeeds {
    pub d_feature: Option<Vec<f64>>,
    /// `(layer, dL/dA per head)`.
    pub d_attn: Vec<(usize, Vec<Array2<f64>>)>,
    pub d_mean: Option<Vec<f64>>,
    pub d_logvar: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<AttentionBlock>,
    pub head: HeadGrads,
}

impl ToyARModel {
    pub fn new(dim: usize, layers: Vec<AttentionBlock>, head: GaussianHead) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("model dimension must be >= 1"));
        }
        if layers.len() < 2 {
            return Err(invalid(format!(
                "model depth must be >= 2, got {}",
                layers.len()
            )));
        }
        check_dim(dim, head.dim())?;
        for block in &layers {
            if block.heads.is_empty() {
                return Err(invalid("attention block needs at least one head"));
            }
            for h in &block.heads {
                for w in [&h.wq, &h.wk, &h.wv] {
                    if w.dim() != (dim, dim) {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            got: w.nrows(),
                        });
                    }
                }
            }
        }
        Ok(Self { dim, layers, head })
    }

    pub fn random(
        dim: usize,
        depth: usize,
        heads: usize,
        scales: &InitScales,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(invalid("head count must be >= 1"));
        }
        let mat = |std: f64, rng: &mut RandomSource| {
            Array2::from_shape_fn((dim, dim), |_| std * rng.normal())
        };
        let layers = (0..depth)
            .map(|_| AttentionBlock {
                heads: (0..heads)
                    .map(|_| HeadWeights {
                        wq: mat(scales.qk, rng),
                        wk: mat(scales.qk, rng),
                        wv: mat(scales.v, rng),
                    })
                    .collect(),
            })
            .collect();
        let mut head = GaussianHead::zeros(dim);
        head.w_mean = mat(scales.head_mean, rng);
        head.b_logvar.fill(scales.head_logvar);
        Self::new(dim, layers, head)
    }

    pub fn num_heads(&self) -> usize {
        self.layers[0].heads.len()
    }

    /// Multiplies every query/key matrix by `sqrt(factor)`, scaling all
    /// attention logits by `factor`.
    pub fn sharpen_attention(&mut self, factor: f64) {
        let s = factor.sqrt();
        for block in &mut self.layers {
            for h in &mut block.heads {
                h.wq.mapv_inplace(|w| w * s);
                h.wk.mapv_inplace(|w| w * s);
            }
        }
    }

    fn embed(&self, ctx: &[LatentToken], condition: &LatentToken) -> Result<Array2<f64>> {
        if ctx.is_empty() {
            return Err(invalid("context must contain at least the start token"));
        }
        check_dim(self.dim, condition.dim())?;
        let mut h = Array2::zeros((ctx.len(), self.dim));
        for (i, tok) in ctx.iter().enumerate() {
            check_dim(self.dim, tok.dim())?;
            let pe = positional_encoding(i, self.dim);
            for k in 0..self.dim {
                h[[i, k]] = tok.as_slice()[k] + pe[k] + condition.as_slice()[k];
            }
        }
        Ok(h)
    }

    pub fn forward_traced(
        &self,
        ctx: &[LatentToken],
        condition: &LatentToken,
    ) -> Result<(ModelOutput, ForwardTrace)> {
        let mut h = self.embed(ctx, condition)?;
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut hidden = Vec::with_capacity(self.layers.len() + 1);
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut attn = Vec::with_capacity(self.layers.len());
        for block in &self.layers {
            let n = block.heads.len() as f64;
            let mut next = h.clone();
            let mut block_traces = Vec::with_capacity(block.heads.len());
            let mut block_maps = Vec::with_capacity(block.heads.len());
            for w in &block.heads {
                let q = h.dot(&w.wq);
                let k = h.dot(&w.wk);
                let v = h.dot(&w.wv);
                let logits = q.dot(&k.t()) * scale;
                if logits.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("attention logits"));
                }
                let a = softmax_rows_unchecked(&logits);
                next.scaled_add(1.0 / n, &a.dot(&v));
                block_maps.push(AttentionMap::from_softmax(a.clone()));
                block_traces.push(HeadTrace { q, k, v, a });
            }
            hidden.push(h);
            h = next;
            traces.push(block_traces);
            attn.push(block_maps);
        }
        let feature = h.row(h.nrows() - 1).to_vec();
        hidden.push(h);
        if feature.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("model feature"));
        }
        let next_dist = self.head.apply(&feature)?;
        Ok((
            ModelOutput {
                feature,
                attn,
                next_dist,
            },
            ForwardTrace {
                hidden,
                heads: traces,
            },
        ))
    }

    /// Reverse-mode gradients of a scalar loss whose upstream derivatives are
    /// given by `seeds`.
    pub fn backward(&self, trace: &ForwardTrace, seeds: &BackwardSeeds) -> Result<ModelGrads> {
        let mut grads = self.zero_grads();
        let depth = self.layers.len();
        let last = trace.hidden[depth].nrows() - 1;
        let feature = trace.hidden[depth].row(last).to_vec();

        let mut d_feature = vec![0.0; self.dim];
        if let Some(df) = &seeds.d_feature {
            check_dim(self.dim, df.len())?;
            d_feature.iter_mut().zip(df).for_each(|(a, b)| *a += b);
        }
        if seeds.d_mean.is_some() || seeds.d_logvar.is_some() {
            let df = self.head.backward(
                &feature,
                seeds.d_mean.as_deref(),
                seeds.d_logvar.as_deref(),
                &mut grads.head,
            );
            d_feature.iter_mut().zip(&df).for_each(|(a, b)| *a += b);
        }
        for (layer, maps) in &seeds.d_attn {
            if *layer >= depth {
                return Err(Error::LayerOutOfRange {
                    index: *layer,
                    depth,
                });
            }
            check_dim(self.layers[*layer].heads.len(), maps.len())?;
        }

        let mut d_h = Array2::<f64>::zeros(trace.hidden[depth].dim());
        d_h.row_mut(last).assign(&ArrayView1::from(&d_feature));
        let scale = 1.0 / (self.dim as f64).sqrt();

        for l in (0..depth).rev() {
            let h_in = &trace.hidden[l];
            let block = &self.layers[l];
            let n = block.heads.len() as f64;
            let d_out = d_h.clone();
            let d_o = &d_out / n;
            for (hi, (w, tr)) in block.heads.iter().zip(&trace.heads[l]).enumerate() {
                let mut d_a = d_o.dot(&tr.v.t());
                for (layer, maps) in &seeds.d_attn {
                    if *layer == l {
                        d_a += &maps[hi];
                    }
                }
                let d_v = tr.a.t().dot(&d_o);
                let row_dot = (&tr.a * &d_a).sum_axis(Axis(1)).insert_axis(Axis(1));
                let d_s = &tr.a * &(&d_a - &row_dot) * scale;
                let d_q = d_s.dot(&tr.k);
                let d_k = d_s.t().dot(&tr.q);
                let g = &mut grads.layers[l].heads[hi];
                g.wq += &h_in.t().dot(&d_q);
                g.wk += &h_in.t().dot(&d_k);
                g.wv += &h_in.t().dot(&d_v);
                d_h += &d_q.dot(&w.wq.t());
                d_h += &d_k.dot(&w.wk.t());
                d_h += &d_v.dot(&w.wv.t());
            }
        }
        Ok(grads)
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            layers: self
                .layers
                .iter()
                .map(|b| AttentionBlock {
                    heads: b
                        .heads
                        .iter()
                        .map(|_| HeadWeights {
                            wq: Array2::zeros((self.dim, self.dim)),
                            wk: Array2::zeros((self.dim, self.dim)),
                            wv: Array2::zeros((self.dim, self.dim)),
                        })
                        .collect(),
                })
                .collect(),
            head: HeadGrads::zeros(self.dim),
        }
    }
}

impl ModelGrads {
    pub fn add_scaled(&mut self, other: &ModelGrads, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ha, hb) in a.heads.iter_mut().zip(&b.heads) {
                ha.wq.scaled_add(factor, &hb.wq);
                ha.wk.scaled_add(factor, &hb.wk);
                ha.wv.scaled_add(factor, &hb.wv);
            }
        }
        self.head.w_mean.scaled_add(factor, &other.head.w_mean);
        self.head.b_mean.scaled_add(factor, &other.head.b_mean);
        self.head.w_logvar.scaled_add(factor, &other.head.w_logvar);
        self.head.b_logvar.scaled_add(factor, &other.head.b_logvar);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.layers {
            for h in &b.heads {
                out.extend(h.wq.iter().chain(h.wk.iter()).chain(h.wv.iter()));
            }
        }
        out.extend(
            self.head
                .w_mean
                .iter()
                .chain(self.head.b_mean.iter())
                .chain(self.head.w_logvar.iter())
                .chain(self.head.b_logvar.iter()),
        );
        out
    }
}

impl ArModel for ToyARModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn depth(&self) -> usize {
        self.layers.len()
    }

    fn forward(&self, ctx: &[LatentToken], condition: &LatentToken) -> Result<ModelOutput> {
        self.forward_traced(ctx, condition).map(|(out, _)| out)
    }
}

impl Params for ToyARModel {
    fn num_params(&self) -> usize {
        let per_head = 3 * self.dim * self.dim;
        self.layers
            .iter()
            .map(|b| b.heads.len() * per_head)
            .sum::<usize>()
            + 2 * (self.dim * self.dim + self.dim)
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in &self.layers {
            for h in &b.heads {
                out.extend(h.wq.iter().chain(h.wk.iter()).chain(h.wv.iter()));
            }
        }
        out.extend(
            self.head
                .w_mean
                .iter()
                .chain(self.head.b_mean.iter())
                .chain(self.head.w_logvar.iter())
                .chain(self.head.b_logvar.iter()),
        );
        out
    }

    fn assign(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.num_params(), flat.len())?;
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for v in dst {
                *v = it.next().unwrap_or_default();
            }
        };
        for b in &mut self.layers {
            for h in &mut b.heads {
                fill(&mut h.wq.iter_mut());
                fill(&mut h.wk.iter_mut());
                fill(&mut h.wv.iter_mut());
            }
        }
        fill(&mut self.head.w_mean.iter_mut());
        fill(&mut self.head.b_mean.iter_mut());
        fill(&mut self.head.w_logvar.iter_mut());
        fill(&mut self.head.b_logvar.iter_mut());
        Ok(())
    }
}

impl Params for GaussianHead {
    fn num_params(&self) -> usize {
        2 * (self.w_mean.len() + self.b_mean.len())
    }

    fn flatten(&self) -> Vec<f64> {
        self.w_mean
            .iter()
            .chain(self.b_mean.iter())
            .chain(self.w_logvar.iter())
            .chain(self.b_logvar.iter())
            .copied()
            .collect()
    }

    fn assign(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.num_params(), flat.len())?;
        let mut it = flat.iter().copied();
        for v in self
            .w_mean
            .iter_mut()
            .chain(self.b_mean.iter_mut())
            .chain(self.w_logvar.iter_mut())
            .chain(self.b_logvar.iter_mut())
        {
            *v = it.next().unwrap_or_default();
        }
        Ok(())
    }
}

/// Sinusoidal positional encoding of position `pos` in `dim` coordinates.
pub fn positional_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let freq = 1.0 / 10_000f64.powf((2 * (k / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Draft model made of copies of the target's first `n_blocks` blocks and
/// its head.
pub fn init_draft_from_target(target: &ToyARModel, n_blocks: usize) -> Result<ToyARModel> {
    if n_blocks < 2 || n_blocks >= target.layers.len() {
        return Err(invalid(format!(
            "draft block count {n_blocks} outside [2, {})",
            target.layers.len()
        )));
    }
    ToyARModel::new(
        target.dim,
        target.layers[..n_blocks].to_vec(),
        target.head.clone(),
    )
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let (n, m) = (a.len(), b.len());
    let a2 = a.to_shape((n, 1)).expect("column").to_owned();
    let b2 = b.to_shape((1, m)).expect("row").to_owned();
    a2.dot(&b2)
}
