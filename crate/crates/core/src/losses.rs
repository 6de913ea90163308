//! Contrastive and viewpoint-consistency losses with analytic gradients.
//!
//! Both losses take raw embeddings and normalize internally.

use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::{cosine_distance, cosine_distance_grad, dot, l2_normalize, normalize_backward, Matrix};

/// Matched image/text rows plus the temperature.
#[derive(Debug, Clone)]
pub struct ItcBatch {
    pub image: Matrix,
    pub text: Matrix,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct ItcOutput {
    pub loss: f64,
    pub grad_image: Matrix,
    pub grad_text: Matrix,
    pub grad_tau: f64,
    /// `τ · ∂L/∂τ`.
    pub grad_log_tau: f64,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    max + v.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE on a similarity matrix. Returns the loss and `∂L/∂S`.
pub fn itc_from_similarities(sim: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    let n = sim.rows();
    if n == 0 || sim.cols() != n {
        return Err(OvtError::dims("itc_loss", sim.shape_str(), "square N×N with N ≥ 1"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(OvtError::Config(format!("temperature {tau} must be positive")));
    }
    let logits = Matrix::from_fn(n, n, |i, j| sim.get(i, j) / tau);
    let mut grad = Matrix::zeros(n, n);
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        i2t += lse - row[i];
        for (j, &r) in row.iter().enumerate() {
            grad.set(i, j, (r - lse).exp());
        }
    }
    for j in 0..n {
        let col = (0..n).map(|i| logits.get(i, j));
        let lse = log_sum_exp(col);
        t2i += lse - logits.get(j, j);
        for i in 0..n {
            let p = (logits.get(i, j) - lse).exp();
            grad.set(i, j, grad.get(i, j) + p);
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        grad.set(i, i, grad.get(i, i) - 2.0);
    }
    // grad now holds ∂L/∂logits · 2N; convert to ∂L/∂S.
    grad.scale(scale / tau);
    let loss = 0.5 * (i2t + t2i) / n as f64;
    if !loss.is_finite() {
        return Err(OvtError::NonFinite("itc loss".into()));
    }
    Ok((loss, grad))
}

/// `L = ½(L_{I→T} + L_{T→I})` over cosine similarities divided by `τ`.
pub fn itc_loss(batch: &ItcBatch) -> Result<ItcOutput> {
    let (n, d) = batch.image.shape();
    if batch.text.shape() != (n, d) {
        return Err(OvtError::dims(
            "itc_loss",
            batch.image.shape_str(),
            batch.text.shape_str(),
        ));
    }
    if n == 0 {
        return Err(OvtError::Empty("itc batch"));
    }
    let unit = |m: &Matrix| -> Result<Matrix> {
        let rows = m.iter_rows().map(l2_normalize).collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    };
    let img = unit(&batch.image)?;
    let txt = unit(&batch.text)?;
    let sim = Matrix::from_fn(n, n, |i, j| dot(img.row(i), txt.row(j)));
    let (loss, g_sim) = itc_from_similarities(&sim, batch.tau)?;

    let g_img_unit = g_sim.matmul(&txt)?;
    let g_txt_unit = g_sim.transpose().matmul(&img)?;
    let mut grad_image = Matrix::zeros(n, d);
    let mut grad_text = Matrix::zeros(n, d);
    for i in 0..n {
        grad_image
            .row_mut(i)
            .copy_from_slice(&normalize_backward(batch.image.row(i), g_img_unit.row(i)));
        grad_text
            .row_mut(i)
            .copy_from_slice(&normalize_backward(batch.text.row(i), g_txt_unit.row(i)));
    }
    // logits = S/τ, so ∂L/∂τ = −Σ (∂L/∂S ⊙ S)/τ.
    let grad_tau = -dot(g_sim.data(), sim.data()) / batch.tau;
    Ok(ItcOutput {
        loss,
        grad_image,
        grad_text,
        grad_tau,
        grad_log_tau: grad_tau * batch.tau,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// `max(d + m, 0)`.
    #[default]
    Additive,
    /// `max(d − m, 0)`.
    Hinge,
}

impl MarginMode {
    fn shifted(self, d: f64, m: f64) -> f64 {
        match self {
            MarginMode::Additive => d + m,
            MarginMode::Hinge => d - m,
        }
    }
}

/// Margin loss on the cosine distance between an outlier and its anchor.
pub fn vc_pair_loss(z: &[f64], anchor: &[f64], margin: f64, mode: MarginMode) -> Result<f64> {
    Ok(mode.shifted(cosine_distance(z, anchor)?, margin).max(0.0))
}

/// Gradient of [`vc_pair_loss`] with respect to `z`; zero where the hinge is inactive.
pub fn vc_pair_grad(z: &[f64], anchor: &[f64], margin: f64, mode: MarginMode) -> Result<Vec<f64>> {
    if mode.shifted(cosine_distance(z, anchor)?, margin) > 0.0 {
        cosine_distance_grad(z, anchor)
    } else {
        Ok(vec![0.0; z.len()])
    }
}

/// Outlier/anchor pairs. Anchors are constants: no gradient is returned for them.
#[derive(Debug, Clone, Default)]
pub struct VcBatch {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub margin: f64,
    pub mode: MarginMode,
}

#[derive(Debug, Clone)]
pub struct VcOutput {
    pub loss: f64,
    /// One gradient per pair, for the outlier embedding.
    pub grads: Vec<Vec<f64>>,
}

pub fn vc_loss(batch: &VcBatch) -> Result<VcOutput> {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.pairs.len());
    for (z, anchor) in &batch.pairs {
        loss += vc_pair_loss(z, anchor, batch.margin, batch.mode)?;
        grads.push(vc_pair_grad(z, anchor, batch.margin, batch.mode)?);
    }
    Ok(VcOutput { loss, grads })
}

/// `itc + λ·vc`.
pub fn total_loss(itc: f64, vc: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(OvtError::Config(format!("loss balance {lambda} must be non-negative")));
    }
    Ok(itc + lambda * vc)
}
