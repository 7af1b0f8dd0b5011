//! Versioned JSON weight container.
//!
//! Weights are stored as one flat array in the order defined by
//! [`Params::flatten`]. Floats are written in shortest round-trip form and
//! parsed with exact rounding, so save → load is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AttentionBlock, GaussianHead, HeadWeights, MlpDenoiser, Params, ToyARModel};
use crate::error::{Error, Result};

pub const FORMAT: &str = "cspd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    ToyAr {
        dim: usize,
        depth: usize,
        heads: usize,
    },
    Denoiser {
        dim: usize,
        cond_dim: usize,
        hidden: usize,
    },
    GaussianHead {
        dim: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub weights: Vec<f64>,
}

impl Checkpoint {
    fn new(kind: ModelKind, weights: Vec<f64>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind,
            weights,
        }
    }

    pub fn from_toy(model: &ToyARModel) -> Self {
        use super::ArModel;
        Self::new(
            ModelKind::ToyAr {
                dim: model.dim(),
                depth: model.depth(),
                heads: model.num_heads(),
            },
            model.flatten(),
        )
    }

    pub fn from_denoiser(net: &MlpDenoiser) -> Self {
        Self::new(
            ModelKind::Denoiser {
                dim: net.dim(),
                cond_dim: net.cond_dim(),
                hidden: net.hidden(),
            },
            net.flatten(),
        )
    }

    pub fn from_gaussian_head(head: &GaussianHead) -> Self {
        Self::new(ModelKind::GaussianHead { dim: head.dim() }, head.flatten())
    }

    fn check_header(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format tag {:?}",
                self.format
            )));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                self.version
            )));
        }
        Ok(())
    }

    pub fn to_toy(&self) -> Result<ToyARModel> {
        self.check_header()?;
        let ModelKind::ToyAr { dim, depth, heads } = self.kind else {
            return Err(Error::Checkpoint("not a toy AR checkpoint".into()));
        };
        let zeros = || Array2::zeros((dim, dim));
        let layers = (0..depth)
            .map(|_| AttentionBlock {
                heads: (0..heads)
                    .map(|_| HeadWeights {
                        wq: zeros(),
                        wk: zeros(),
                        wv: zeros(),
                    })
                    .collect(),
            })
            .collect();
        let mut model = ToyARModel::new(dim, layers, GaussianHead::zeros(dim))?;
        model
            .assign(&self.weights)
            .map_err(|e| Error::Checkpoint(format!("weight array: {e}")))?;
        Ok(model)
    }

    pub fn to_denoiser(&self) -> Result<MlpDenoiser> {
        self.check_header()?;
        let ModelKind::Denoiser {
            dim,
            cond_dim,
            hidden,
        } = self.kind
        else {
            return Err(Error::Checkpoint("not a denoiser checkpoint".into()));
        };
        let fan_in = dim + super::TIME_EMBED_DIM + cond_dim;
        let mut net = MlpDenoiser {
            w1: Array2::zeros((hidden, fan_in)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((dim, hidden)),
            b2: Array1::zeros(dim),
            gain: Array1::zeros(dim),
        };
        net.assign(&self.weights)
            .map_err(|e| Error::Checkpoint(format!("weight array: {e}")))?;
        Ok(net)
    }

    pub fn to_gaussian_head(&self) -> Result<GaussianHead> {
        self.check_header()?;
        let ModelKind::GaussianHead { dim } = self.kind else {
            return Err(Error::Checkpoint("not a gaussian head checkpoint".into()));
        };
        let mut head = GaussianHead::zeros(dim);
        head.assign(&self.weights)
            .map_err(|e| Error::Checkpoint(format!("weight array: {e}")))?;
        Ok(head)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        ckpt.check_header()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
