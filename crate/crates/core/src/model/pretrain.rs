//! Builds the frozen "pretrained" towers that fine-tuning starts from.
//!
//! The text tower is a random linear map over hashed token counts. The visual
//! tower is aligned to it in closed form: class-mean features from clean
//! single-view pairs are mapped onto the class prompt embeddings by least
//! squares. On top of the aligned map the base carries a low-rank
//! viewpoint-sensitive component: it responds to input directions orthogonal
//! to every class mean and writes into embedding directions orthogonal to
//! every class prompt embedding. That component leaves zero-shot
//! ranking untouched but spreads the views of one object apart, which is the
//! failure mode fine-tuning is meant to remove.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::{dot, l2_normalize, norm, solve, Matrix};
use crate::model::encoder::{Architecture, EffectiveVisual, EncoderConfig, VisualBase};
use crate::model::text::{TextEncoder, TEXT_BUCKETS};
use crate::model::ModelState;
use crate::seeding::{self, Rng};
use crate::synthdata::{zero_shot_prompt, MultiViewDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub architecture: Architecture,
    /// Attention mode only.
    pub token_count: usize,
    /// Initial temperature.
    pub temperature: f64,
    /// Rank of the viewpoint-sensitive component of the frozen base.
    pub nuisance_rank: usize,
    /// Gain of that component.
    pub nuisance_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            architecture: Architecture::Linear,
            token_count: 1,
            temperature: 0.07,
            nuisance_rank: 4,
            nuisance_scale: 8.0,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            embed_dim: self.embed_dim,
            architecture: self.architecture,
            token_count: self.token_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(OvtError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.nuisance_scale >= 0.0) {
            return Err(OvtError::Config("nuisance_scale must be >= 0".into()));
        }
        if self.embed_dim < 2 {
            return Err(OvtError::Config(format!("embed_dim {} must be >= 2", self.embed_dim)));
        }
        Ok(())
    }
}

pub fn random_text_encoder(embed_dim: usize, rng: &mut Rng) -> TextEncoder {
    TextEncoder {
        weight: Matrix::from_fn(embed_dim, TEXT_BUCKETS, |_, _| rng.sample::<f64, _>(StandardNormal)),
    }
}

/// Removes from `v` its components along `basis` (assumed orthonormal), twice.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
    }
}

fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let scale = norm(v);
        let mut u = v.clone();
        orthogonalize(&mut u, &basis);
        if norm(&u) > 1e-9 * scale.max(1.0) {
            basis.push(l2_normalize(&u).expect("nonzero residual"));
        }
    }
    basis
}

/// Up to `count` random unit vectors orthogonal to `avoid` and to each other.
fn random_complement(dim: usize, avoid: &[Vec<f64>], count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis = orthonormal_basis(avoid);
    let mut out = Vec::new();
    let available = dim.saturating_sub(basis.len());
    for _ in 0..count.min(available) {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        orthogonalize(&mut v, &basis);
        if let Ok(u) = l2_normalize(&v) {
            basis.push(u.clone());
            out.push(u);
        }
    }
    out
}

/// Frozen visual tower aligned to `text` on the clean pairs.
pub fn pretrained_visual(
    cfg: &EncoderConfig,
    clean: &MultiViewDataset,
    text: &TextEncoder,
    nuisance_rank: usize,
    nuisance_scale: f64,
    rng: &mut Rng,
) -> Result<VisualBase> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(OvtError::Empty("clean dataset for base alignment"));
    }
    clean.check_consistent()?;
    if clean.input_dim() != Some(cfg.input_dim) {
        return Err(OvtError::dims(
            "pretrained_visual",
            format!("encoder input_dim {}", cfg.input_dim),
            format!("data input_dim {}", clean.input_dim().unwrap_or(0)),
        ));
    }

    // Frozen feature extractor ahead of the fitted projection.
    let (attention, feat_dim) = match cfg.architecture {
        Architecture::Linear => (None, cfg.input_dim),
        Architecture::SingleAttentionBlock => {
            let h = cfg.token_dim();
            let normal = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("valid std");
            let mut w = || Matrix::from_fn(h, h, |_, _| normal.sample(&mut *rng));
            (Some((w(), w(), w(), w())), h)
        }
    };
    let features = |raw: &[f64]| -> Result<Vec<f64>> {
        match &attention {
            None => Ok(raw.to_vec()),
            Some((wq, wk, wv, wo)) => EffectiveVisual::Attention {
                wq: wq.clone(),
                wk: wk.clone(),
                wv: wv.clone(),
                wo: wo.clone(),
                proj: Matrix::identity(feat_dim),
                token_count: cfg.token_count,
            }
            .forward(raw)
            .map(|(f, _)| f),
        }
    };

    let categories = clean.categories();
    let c = categories.len();
    let d = cfg.embed_dim;
    let mut means = vec![vec![0.0; feat_dim]; c];
    let mut targets = vec![Vec::new(); c];
    let mut counts = vec![0usize; c];
    for r in &clean.records {
        let k = categories
            .iter()
            .position(|x| *x == r.category)
            .expect("known category");
        let f = features(&r.raw)?;
        for (m, v) in means[k].iter_mut().zip(&f) {
            *m += v;
        }
        counts[k] += 1;
    }
    for k in 0..c {
        means[k].iter_mut().for_each(|v| *v /= counts[k] as f64);
        targets[k] = l2_normalize(&text.encode(&zero_shot_prompt(&categories[k]))?)?;
    }

    // W_align = T (MᵀM + ρI)⁻¹ Mᵀ
    let m = Matrix::from_fn(feat_dim, c, |i, j| means[j][i]);
    let t = Matrix::from_fn(d, c, |i, j| targets[j][i]);
    let mut gram = m.transpose().matmul(&m)?;
    let ridge = 1e-8 * (0..c).map(|i| gram.get(i, i)).sum::<f64>() / c as f64;
    for i in 0..c {
        gram.set(i, i, gram.get(i, i) + ridge);
    }
    let coeff = solve(&gram, &m.transpose())?;
    let mut w = t.matmul(&coeff)?;

    let outputs = random_complement(d, &targets, nuisance_rank, rng);
    let inputs = random_complement(feat_dim, &means, outputs.len(), rng);
    for (u, v) in outputs.iter().zip(&inputs) {
        w.add_outer(nuisance_scale, u, v);
    }

    let base = match attention {
        None => VisualBase::Linear { w },
        Some((wq, wk, wv, wo)) => VisualBase::Attention {
            wq,
            wk,
            wv,
            wo,
            proj: w,
            token_count: cfg.token_count,
        },
    };
    base.validate()?;
    Ok(base)
}

/// Model whose randomness all flows from `seed`.
pub fn build_model(
    cfg: &ModelConfig,
    input_dim: usize,
    lora_rank: usize,
    alpha: f64,
    train_temperature: bool,
    clean: &MultiViewDataset,
    seed: u64,
) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = seeding::stream(seed, "model");
    let text = random_text_encoder(cfg.embed_dim, &mut rng);
    let visual = pretrained_visual(
        &cfg.encoder(input_dim),
        clean,
        &text,
        cfg.nuisance_rank,
        cfg.nuisance_scale,
        &mut rng,
    )?;
    ModelState::new(
        visual,
        text,
        lora_rank,
        alpha,
        cfg.temperature,
        train_temperature,
        &mut rng,
    )
}
