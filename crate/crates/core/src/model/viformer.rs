//! Post-encoder embedding transformer.
//!
//! One pre-norm block (single-head attention, then a GELU MLP), applied to the
//! pooled embedding as a single token. With one token the attention weights
//! are identically 1, so the attention branch reduces to `W_O·W_V·LN(z)`; the
//! query/key projections are kept for shape fidelity and receive zero gradient.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::{dot, softmax, Matrix};
use crate::seeding::Rng;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VIFormerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// `4d × d`.
    pub w1: Matrix,
    /// `d × 4d`.
    pub w2: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

/// Parameter names in storage order.
pub const VIFORMER_TENSORS: [&str; 10] = [
    "wq", "wk", "wv", "wo", "w1", "w2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
];

impl VIFormerParams {
    /// Identity-at-init block: `W_O = 0` and `W_2 = 0`; the value projection
    /// is random so the attention branch can start learning.
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let normal = Normal::new(0.0, s).expect("valid std");
        let mut rand = |r, c| Matrix::from_fn(r, c, |_, _| normal.sample(&mut *rng));
        Self {
            wq: rand(d, d),
            wk: rand(d, d),
            wv: rand(d, d),
            wo: Matrix::zeros(d, d),
            w1: rand(4 * d, d),
            w2: Matrix::zeros(d, 4 * d),
            ln1_gain: Matrix::from_fn(1, d, |_, _| 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::from_fn(1, d, |_, _| 1.0),
            ln2_bias: Matrix::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            w1: z(&self.w1),
            w2: z(&self.w2),
            ln1_gain: z(&self.ln1_gain),
            ln1_bias: z(&self.ln1_bias),
            ln2_gain: z(&self.ln2_gain),
            ln2_bias: z(&self.ln2_bias),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn tensors(&self) -> [&Matrix; 10] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w1,
            &self.w2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 10] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.w2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let want = [
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (4 * d, d),
            (d, 4 * d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
        ];
        for ((name, m), shape) in VIFORMER_TENSORS.iter().zip(self.tensors()).zip(want) {
            if m.shape() != shape {
                return Err(OvtError::dims(
                    "VIFormerParams",
                    format!("{name} {}", m.shape_str()),
                    format!("{}x{}", shape.0, shape.1),
                ));
            }
            if !m.is_finite() {
                return Err(OvtError::NonFinite(format!("viformer.{name}")));
            }
        }
        Ok(())
    }
}

struct LayerNormCache {
    normed: Vec<f64>,
    inv_std: f64,
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let normed: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = normed
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(h, (g, b))| g * h + b)
        .collect();
    (out, LayerNormCache { normed, inv_std })
}

/// Returns the input gradient and accumulates gain/bias gradients.
fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    grad_out: &[f64],
    grad_gain: &mut Matrix,
    grad_bias: &mut Matrix,
) -> Vec<f64> {
    let n = grad_out.len() as f64;
    let mut g_hat = Vec::with_capacity(grad_out.len());
    for (i, g) in grad_out.iter().enumerate() {
        grad_gain.data_mut()[i] += g * cache.normed[i];
        grad_bias.data_mut()[i] += g;
        g_hat.push(g * gain[i]);
    }
    let mean_g = g_hat.iter().sum::<f64>() / n;
    let mean_gh = dot(&g_hat, &cache.normed) / n;
    g_hat
        .iter()
        .zip(&cache.normed)
        .map(|(g, h)| cache.inv_std * (g - mean_g - h * mean_gh))
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub struct VIFormerCache {
    ln1: LayerNormCache,
    u1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: f64,
    ln2: LayerNormCache,
    u2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

pub fn viformer_forward(z: &[f64], p: &VIFormerParams) -> Result<Vec<f64>> {
    Ok(viformer_forward_cached(z, p)?.0)
}

pub fn viformer_forward_cached(z: &[f64], p: &VIFormerParams) -> Result<(Vec<f64>, VIFormerCache)> {
    let d = p.dim();
    if z.len() != d {
        return Err(OvtError::dims(
            "viformer_forward",
            format!("embedding of {}", z.len()),
            format!("block of {d}"),
        ));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(OvtError::NonFinite("viformer input".into()));
    }
    let (u1, ln1) = layer_norm(z, p.ln1_gain.data(), p.ln1_bias.data());
    let q = p.wq.matvec(&u1)?;
    let k = p.wk.matvec(&u1)?;
    let v = p.wv.matvec(&u1)?;
    let score = dot(&q, &k) / (d as f64).sqrt();
    let attn = softmax(&[score])[0];
    let head: Vec<f64> = v.iter().map(|x| attn * x).collect();
    let a = p.wo.matvec(&head)?;
    let z1: Vec<f64> = z.iter().zip(&a).map(|(x, y)| x + y).collect();

    let (u2, ln2) = layer_norm(&z1, p.ln2_gain.data(), p.ln2_bias.data());
    let pre = p.w1.matvec(&u2)?;
    let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
    let mlp = p.w2.matvec(&act)?;
    let out: Vec<f64> = z1.iter().zip(&mlp).map(|(x, y)| x + y).collect();
    let cache = VIFormerCache {
        ln1,
        u1,
        q,
        k,
        v,
        attn,
        ln2,
        u2,
        pre,
        act,
    };
    Ok((out, cache))
}

/// Accumulates parameter gradients into `grads`; returns `∂L/∂z`.
pub fn viformer_backward(
    p: &VIFormerParams,
    cache: &VIFormerCache,
    grad_out: &[f64],
    grads: &mut VIFormerParams,
) -> Result<Vec<f64>> {
    let d = p.dim();
    // out = z1 + W2·gelu(W1·LN2(z1))
    grads.w2.add_outer(1.0, grad_out, &cache.act);
    let g_act = p.w2.matvec_t(grad_out)?;
    let g_pre: Vec<f64> = g_act.iter().zip(&cache.pre).map(|(g, &x)| g * gelu_grad(x)).collect();
    grads.w1.add_outer(1.0, &g_pre, &cache.u2);
    let g_u2 = p.w1.matvec_t(&g_pre)?;
    let g_ln2 = layer_norm_backward(
        &cache.ln2,
        p.ln2_gain.data(),
        &g_u2,
        &mut grads.ln2_gain,
        &mut grads.ln2_bias,
    );
    let g_z1: Vec<f64> = grad_out.iter().zip(&g_ln2).map(|(a, b)| a + b).collect();

    // z1 = z + W_O·(attn·v), v = W_V·u1, attn = softmax([q·k/√d])
    let head: Vec<f64> = cache.v.iter().map(|x| cache.attn * x).collect();
    grads.wo.add_outer(1.0, &g_z1, &head);
    let g_head = p.wo.matvec_t(&g_z1)?;
    let g_v: Vec<f64> = g_head.iter().map(|g| cache.attn * g).collect();
    let g_attn = dot(&g_head, &cache.v);
    // Softmax over a single score: ∂attn/∂score = attn·(1 - attn) = 0.
    let g_score = cache.attn * (g_attn - g_attn * cache.attn);
    let scale = g_score / (d as f64).sqrt();
    let g_q: Vec<f64> = cache.k.iter().map(|x| scale * x).collect();
    let g_k: Vec<f64> = cache.q.iter().map(|x| scale * x).collect();
    grads.wv.add_outer(1.0, &g_v, &cache.u1);
    grads.wq.add_outer(1.0, &g_q, &cache.u1);
    grads.wk.add_outer(1.0, &g_k, &cache.u1);
    let mut g_u1 = p.wv.matvec_t(&g_v)?;
    for extra in [p.wq.matvec_t(&g_q)?, p.wk.matvec_t(&g_k)?] {
        for (a, b) in g_u1.iter_mut().zip(&extra) {
            *a += b;
        }
    }
    let g_ln1 = layer_norm_backward(
        &cache.ln1,
        p.ln1_gain.data(),
        &g_u1,
        &mut grads.ln1_gain,
        &mut grads.ln1_bias,
    );
    Ok(g_z1.iter().zip(&g_ln1).map(|(a, b)| a + b).collect())
}

/// `α·s + (1 − α)·z`; the endpoints return their input exactly.
pub fn fuse_residual(z: &[f64], s: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(OvtError::Config(format!("residual ratio {alpha} outside [0, 1]")));
    }
    if z.len() != s.len() {
        return Err(OvtError::dims("fuse_residual", z.len(), s.len()));
    }
    if alpha == 0.0 {
        return Ok(z.to_vec());
    }
    if alpha == 1.0 {
        return Ok(s.to_vec());
    }
    Ok(z.iter()
        .zip(s)
        .map(|(zi, si)| alpha * si + (1.0 - alpha) * zi)
        .collect())
}
