//! Frozen visual encoders and their backward passes with respect to the
//! LoRA-composed weights.

use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::{softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// `z = W̃ · x`.
    Linear,
    /// Raw input reshaped to `token_count × token_dim`, one residual
    /// self-attention layer, mean pooling, frozen output projection.
    SingleAttentionBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub architecture: Architecture,
    /// Attention mode only; `token_count · token_dim == input_dim`.
    #[serde(default = "one")]
    pub token_count: usize,
}

fn one() -> usize {
    1
}

impl EncoderConfig {
    pub fn linear(input_dim: usize, embed_dim: usize) -> Self {
        Self {
            input_dim,
            embed_dim,
            architecture: Architecture::Linear,
            token_count: 1,
        }
    }

    pub fn attention(input_dim: usize, embed_dim: usize, token_count: usize) -> Self {
        Self {
            input_dim,
            embed_dim,
            architecture: Architecture::SingleAttentionBlock,
            token_count,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.input_dim / self.token_count.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(OvtError::Config(format!("embed_dim {} must be >= 2", self.embed_dim)));
        }
        if self.input_dim == 0 {
            return Err(OvtError::Config("input_dim must be >= 1".into()));
        }
        if self.architecture == Architecture::SingleAttentionBlock
            && (self.token_count == 0 || !self.input_dim.is_multiple_of(self.token_count))
        {
            return Err(OvtError::Config(format!(
                "attention mode needs token_count >= 1 dividing input_dim {} (got {})",
                self.input_dim, self.token_count
            )));
        }
        Ok(())
    }
}

/// Frozen base weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VisualBase {
    Linear {
        /// `embed_dim × input_dim`.
        w: Matrix,
    },
    Attention {
        /// Each `token_dim × token_dim`.
        wq: Matrix,
        wk: Matrix,
        wv: Matrix,
        wo: Matrix,
        /// `embed_dim × token_dim`.
        proj: Matrix,
        token_count: usize,
    },
}

impl VisualBase {
    /// Names of the weights that carry adapters, in adapter order.
    pub fn adapter_targets(&self) -> Vec<&'static str> {
        match self {
            VisualBase::Linear { .. } => vec!["visual.w"],
            VisualBase::Attention { .. } => vec!["visual.wq", "visual.wk", "visual.wv", "visual.wo"],
        }
    }

    /// Weights wrapped by adapters, in adapter order.
    pub fn adapted_weights(&self) -> Vec<&Matrix> {
        match self {
            VisualBase::Linear { w } => vec![w],
            VisualBase::Attention { wq, wk, wv, wo, .. } => vec![wq, wk, wv, wo],
        }
    }

    /// Every frozen tensor with its name.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            VisualBase::Linear { w } => vec![("visual.w", w)],
            VisualBase::Attention {
                wq, wk, wv, wo, proj, ..
            } => vec![
                ("visual.wq", wq),
                ("visual.wk", wk),
                ("visual.wv", wv),
                ("visual.wo", wo),
                ("visual.proj", proj),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            VisualBase::Linear { w } => w.cols(),
            VisualBase::Attention { wq, token_count, .. } => wq.cols() * token_count,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            VisualBase::Linear { w } => w.rows(),
            VisualBase::Attention { proj, .. } => proj.rows(),
        }
    }

    pub fn config(&self) -> EncoderConfig {
        match self {
            VisualBase::Linear { w } => EncoderConfig::linear(w.cols(), w.rows()),
            VisualBase::Attention { token_count, .. } => {
                EncoderConfig::attention(self.input_dim(), self.embed_dim(), *token_count)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            VisualBase::Linear { w } => {
                if !w.is_finite() {
                    return Err(OvtError::NonFinite("visual.w".into()));
                }
            }
            VisualBase::Attention {
                wq,
                wk,
                wv,
                wo,
                proj,
                token_count,
            } => {
                let h = wq.rows();
                for (name, m) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
                    if m.shape() != (h, h) {
                        return Err(OvtError::dims(
                            "VisualBase",
                            format!("{name} {}", m.shape_str()),
                            format!("{h}x{h}"),
                        ));
                    }
                }
                if proj.cols() != h || *token_count == 0 {
                    return Err(OvtError::dims(
                        "VisualBase",
                        format!("proj {}", proj.shape_str()),
                        format!("?x{h}"),
                    ));
                }
            }
        }
        self.config().validate()
    }
}

/// Encoder weights with adapters already folded in.
#[derive(Debug, Clone)]
pub enum EffectiveVisual {
    Linear {
        w: Matrix,
    },
    Attention {
        wq: Matrix,
        wk: Matrix,
        wv: Matrix,
        wo: Matrix,
        proj: Matrix,
        token_count: usize,
    },
}

/// Intermediate values needed by the backward pass.
#[allow(clippy::large_enum_variant)]
pub enum VisualCache {
    Linear {
        x: Vec<f64>,
    },
    Attention {
        x: Matrix,
        q: Matrix,
        k: Matrix,
        v: Matrix,
        probs: Matrix,
        heads: Matrix,
    },
}

impl EffectiveVisual {
    pub fn input_dim(&self) -> usize {
        match self {
            EffectiveVisual::Linear { w } => w.cols(),
            EffectiveVisual::Attention { wq, token_count, .. } => wq.cols() * token_count,
        }
    }

    pub fn forward(&self, raw: &[f64]) -> Result<(Vec<f64>, VisualCache)> {
        if raw.len() != self.input_dim() {
            return Err(OvtError::dims(
                "encode_image",
                format!("input of {}", raw.len()),
                format!("encoder input_dim {}", self.input_dim()),
            ));
        }
        match self {
            EffectiveVisual::Linear { w } => Ok((w.matvec(raw)?, VisualCache::Linear { x: raw.to_vec() })),
            EffectiveVisual::Attention {
                wq,
                wk,
                wv,
                wo,
                proj,
                token_count,
            } => {
                let t = *token_count;
                let h = wq.rows();
                let x = Matrix::from_vec(t, h, raw.to_vec())?;
                let q = x.matmul(&wq.transpose())?;
                let k = x.matmul(&wk.transpose())?;
                let v = x.matmul(&wv.transpose())?;
                let scale = 1.0 / (h as f64).sqrt();
                let mut probs = Matrix::zeros(t, t);
                for i in 0..t {
                    let scores: Vec<f64> = (0..t).map(|j| crate::linalg::dot(q.row(i), k.row(j)) * scale).collect();
                    probs.row_mut(i).copy_from_slice(&softmax(&scores));
                }
                let heads = probs.matmul(&v)?;
                let out = heads.matmul(&wo.transpose())?;
                let mut pooled = vec![0.0; h];
                for i in 0..t {
                    for ((p, xi), oi) in pooled.iter_mut().zip(x.row(i)).zip(out.row(i)) {
                        *p += (xi + oi) / t as f64;
                    }
                }
                let z = proj.matvec(&pooled)?;
                Ok((
                    z,
                    VisualCache::Attention {
                        x,
                        q,
                        k,
                        v,
                        probs,
                        heads,
                    },
                ))
            }
        }
    }

    /// Accumulates `∂L/∂W̃` for each adapted weight (adapter order) given `∂L/∂z`.
    pub fn backward(&self, cache: &VisualCache, grad_z: &[f64], grad_weights: &mut [Matrix]) -> Result<()> {
        match (self, cache) {
            (EffectiveVisual::Linear { .. }, VisualCache::Linear { x }) => {
                grad_weights[0].add_outer(1.0, grad_z, x);
                Ok(())
            }
            (
                EffectiveVisual::Attention {
                    wq,
                    wo,
                    proj,
                    token_count,
                    ..
                },
                VisualCache::Attention {
                    x,
                    q,
                    k,
                    v,
                    probs,
                    heads,
                },
            ) => {
                let t = *token_count;
                let h = wq.rows();
                let g_pooled = proj.matvec_t(grad_z)?;
                // Every token's output row receives g_pooled / t.
                let g_row: Vec<f64> = g_pooled.iter().map(|g| g / t as f64).collect();
                let g_out = Matrix::from_fn(t, h, |_, j| g_row[j]);
                // out = heads · W_Oᵀ
                grad_weights[3].axpy(1.0, &g_out.transpose().matmul(heads)?)?;
                let g_heads = g_out.matmul(wo)?;
                // heads = P · V
                let g_probs = g_heads.matmul(&v.transpose())?;
                let g_v = probs.transpose().matmul(&g_heads)?;
                let scale = 1.0 / (h as f64).sqrt();
                let mut g_scores = Matrix::zeros(t, t);
                for i in 0..t {
                    let p = probs.row(i);
                    let gp = g_probs.row(i);
                    let inner = crate::linalg::dot(p, gp);
                    for j in 0..t {
                        g_scores.set(i, j, p[j] * (gp[j] - inner) * scale);
                    }
                }
                let g_q = g_scores.matmul(k)?;
                let g_k = g_scores.transpose().matmul(q)?;
                grad_weights[0].axpy(1.0, &g_q.transpose().matmul(x)?)?;
                grad_weights[1].axpy(1.0, &g_k.transpose().matmul(x)?)?;
                grad_weights[2].axpy(1.0, &g_v.transpose().matmul(x)?)?;
                Ok(())
            }
            _ => Err(OvtError::Config("encoder cache does not match architecture".into())),
        }
    }
}
