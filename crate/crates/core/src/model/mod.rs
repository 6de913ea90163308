//! Dual-stream toy model: frozen visual and text towers, LoRA adapters on the
//! visual weights, and a residual-fused embedding transformer on top.
//!
//! ```text
//! z  = E_{W + BA}(x)
//! z̃ = α·f_θ(z) + (1 − α)·z
//! ```

pub mod checkpoint;
pub mod encoder;
pub mod lora;
pub mod pretrain;
pub mod text;
pub mod viformer;

use sha2::{Digest, Sha256};

use crate::error::{OvtError, Result};
use crate::linalg::Matrix;
use crate::seeding::Rng;

pub use encoder::{Architecture, EffectiveVisual, EncoderConfig, VisualBase, VisualCache};
pub use lora::{lora_effective_weight, LoraAdapter};
pub use text::TextEncoder;
pub use viformer::{fuse_residual, viformer_forward, VIFormerCache, VIFormerParams};

/// Bounds applied to a trainable temperature.
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

/// Everything gradient descent may touch. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub adapters: Vec<LoraAdapter>,
    pub viformer: VIFormerParams,
    pub log_tau: f64,
}

impl Trainable {
    pub fn zeros_like(&self) -> Self {
        Self {
            adapters: self
                .adapters
                .iter()
                .map(|a| LoraAdapter {
                    a: Matrix::zeros(a.a.rows(), a.a.cols()),
                    b: Matrix::zeros(a.b.rows(), a.b.cols()),
                    target: a.target.clone(),
                })
                .collect(),
            viformer: self.viformer.zeros_like(),
            log_tau: 0.0,
        }
    }

    /// Named tensors in canonical order; `log_tau` last as a 1×1 slice.
    pub fn named_slices(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for a in &self.adapters {
            out.push((format!("{}.lora_a", a.target), a.a.data()));
            out.push((format!("{}.lora_b", a.target), a.b.data()));
        }
        for (name, m) in viformer::VIFORMER_TENSORS.iter().zip(self.viformer.tensors()) {
            out.push((format!("viformer.{name}"), m.data()));
        }
        out.push(("log_tau".to_string(), std::slice::from_ref(&self.log_tau)));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for a in &mut self.adapters {
            out.push(a.a.data_mut());
            out.push(a.b.data_mut());
        }
        for m in self.viformer.tensors_mut() {
            out.push(m.data_mut());
        }
        out.push(std::slice::from_mut(&mut self.log_tau));
        out
    }

    pub fn flatten(&self, include_tau: bool) -> Vec<f64> {
        let slices = self.named_slices();
        let n = slices.len() - usize::from(!include_tau);
        slices[..n].iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64], include_tau: bool) -> Result<()> {
        let mut slices = self.slices_mut();
        if !include_tau {
            slices.pop();
        }
        let want: usize = slices.iter().map(|s| s.len()).sum();
        if want != flat.len() {
            return Err(OvtError::dims("Trainable::unflatten", want, flat.len()));
        }
        let mut off = 0;
        for s in slices {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `(group name, flat range)` for each tensor, matching [`Trainable::flatten`].
    pub fn groups(&self, include_tau: bool) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut off = 0;
        let slices = self.named_slices();
        let n = slices.len() - usize::from(!include_tau);
        for (name, s) in &slices[..n] {
            out.push((name.clone(), off..off + s.len()));
            off += s.len();
        }
        out
    }

    pub fn num_params(&self, include_tau: bool) -> usize {
        self.adapters.iter().map(LoraAdapter::num_params).sum::<usize>()
            + self.viformer.num_params()
            + usize::from(include_tau)
    }

    pub fn is_finite(&self) -> bool {
        self.named_slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub visual: VisualBase,
    pub text: TextEncoder,
    pub trainable: Trainable,
    /// Residual ratio in `[0, 1]`.
    pub alpha: f64,
    pub train_temperature: bool,
}

impl ModelState {
    /// Wraps frozen towers with fresh adapters (`B = 0`) and an identity-at-init VIFormer.
    pub fn new(
        visual: VisualBase,
        text: TextEncoder,
        lora_rank: usize,
        alpha: f64,
        tau: f64,
        train_temperature: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        visual.validate()?;
        if visual.embed_dim() != text.embed_dim() {
            return Err(OvtError::dims(
                "ModelState",
                format!("visual embed {}", visual.embed_dim()),
                format!("text embed {}", text.embed_dim()),
            ));
        }
        let adapters = visual
            .adapter_targets()
            .into_iter()
            .zip(visual.adapted_weights())
            .map(|(name, w)| LoraAdapter::new(name, w.rows(), w.cols(), lora_rank, rng))
            .collect::<Result<Vec<_>>>()?;
        let viformer = VIFormerParams::init(visual.embed_dim(), rng);
        let state = Self {
            visual,
            text,
            trainable: Trainable {
                adapters,
                viformer,
                log_tau: tau.ln(),
            },
            alpha,
            train_temperature,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(OvtError::Config(format!(
                "residual ratio {} outside [0, 1]",
                self.alpha
            )));
        }
        let tau = self.tau();
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(OvtError::Config(format!("temperature {tau} must be positive")));
        }
        self.visual.validate()?;
        self.trainable.viformer.validate()?;
        if self.trainable.viformer.dim() != self.embed_dim() {
            return Err(OvtError::dims("ModelState", "viformer", "embed_dim"));
        }
        let weights = self.visual.adapted_weights();
        if weights.len() != self.trainable.adapters.len() {
            return Err(OvtError::dims("ModelState", "adapter count", weights.len()));
        }
        for (w, a) in weights.iter().zip(&self.trainable.adapters) {
            if a.b.rows() != w.rows() || a.a.cols() != w.cols() {
                return Err(OvtError::dims(
                    "ModelState",
                    format!("adapter {}", a.target),
                    w.shape_str(),
                ));
            }
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.visual.embed_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.visual.input_dim()
    }

    pub fn tau(&self) -> f64 {
        self.trainable.log_tau.exp()
    }

    pub fn lora_rank(&self) -> usize {
        self.trainable.adapters.first().map_or(0, LoraAdapter::rank)
    }

    /// Folds adapters into the frozen weights once for many forward passes.
    pub fn image_encoder(&self) -> Result<ImageEncoder<'_>> {
        let eff = |i: usize, base: &Matrix| lora_effective_weight(base, &self.trainable.adapters[i]);
        let visual = match &self.visual {
            VisualBase::Linear { w } => EffectiveVisual::Linear { w: eff(0, w)? },
            VisualBase::Attention {
                wq,
                wk,
                wv,
                wo,
                proj,
                token_count,
            } => EffectiveVisual::Attention {
                wq: eff(0, wq)?,
                wk: eff(1, wk)?,
                wv: eff(2, wv)?,
                wo: eff(3, wo)?,
                proj: proj.clone(),
                token_count: *token_count,
            },
        };
        Ok(ImageEncoder { state: self, visual })
    }

    pub fn encode_image(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.image_encoder()?.encode(raw)
    }

    pub fn encode_text(&self, caption: &str) -> Result<Vec<f64>> {
        self.text.encode(caption)
    }

    /// Frozen encoder output (no adapters, no VIFormer).
    pub fn base_image_embedding(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let visual = match &self.visual {
            VisualBase::Linear { w } => EffectiveVisual::Linear { w: w.clone() },
            VisualBase::Attention {
                wq,
                wk,
                wv,
                wo,
                proj,
                token_count,
            } => EffectiveVisual::Attention {
                wq: wq.clone(),
                wk: wk.clone(),
                wv: wv.clone(),
                wo: wo.clone(),
                proj: proj.clone(),
                token_count: *token_count,
            },
        };
        Ok(visual.forward(raw)?.0)
    }

    /// Frozen tensors with names, visual first.
    pub fn frozen_tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = self.visual.named_tensors();
        out.push(("text.w", &self.text.weight));
        out
    }

    /// SHA-256 over the little-endian bytes of every frozen tensor.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.frozen_tensors() {
            h.update(name.as_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `(total, trainable)` parameter counts.
    pub fn param_counts(&self) -> (usize, usize) {
        let frozen: usize = self.frozen_tensors().iter().map(|(_, m)| m.data().len()).sum();
        let trainable = self.trainable.num_params(self.train_temperature);
        (frozen + trainable, trainable)
    }

    /// Clamps a trainable temperature into `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_temperature(&mut self) {
        self.trainable.log_tau = self.trainable.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }
}

/// Forward pass of one image with everything the backward pass needs.
pub struct ImageForward {
    pub fused: Vec<f64>,
    visual: VisualCache,
    viformer: VIFormerCache,
}

/// Gradient sink for a batch: `∂L/∂W̃` per adapted weight plus VIFormer and temperature.
pub struct GradAccumulator {
    weights: Vec<Matrix>,
    pub viformer: VIFormerParams,
    pub log_tau: f64,
}

impl GradAccumulator {
    pub fn new(state: &ModelState) -> Self {
        Self {
            weights: state
                .visual
                .adapted_weights()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            viformer: state.trainable.viformer.zeros_like(),
            log_tau: 0.0,
        }
    }

    /// Converts accumulated weight gradients into adapter gradients.
    pub fn finish(self, state: &ModelState) -> Result<Trainable> {
        let adapters = state
            .trainable
            .adapters
            .iter()
            .zip(&self.weights)
            .map(|(ad, gw)| {
                let (a, b) = ad.backward(gw)?;
                Ok(LoraAdapter {
                    a,
                    b,
                    target: ad.target.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainable {
            adapters,
            viformer: self.viformer,
            log_tau: if state.train_temperature { self.log_tau } else { 0.0 },
        })
    }
}

pub struct ImageEncoder<'a> {
    state: &'a ModelState,
    visual: EffectiveVisual,
}

impl ImageEncoder<'_> {
    pub fn encode(&self, raw: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(raw)?.fused)
    }

    pub fn forward(&self, raw: &[f64]) -> Result<ImageForward> {
        let (z, visual) = self.visual.forward(raw)?;
        let (s, viformer) = viformer::viformer_forward_cached(&z, &self.state.trainable.viformer)?;
        let fused = fuse_residual(&z, &s, self.state.alpha)?;
        Ok(ImageForward {
            fused,
            visual,
            viformer,
        })
    }

    /// Backpropagates `∂L/∂z̃` into `acc`.
    pub fn backward(&self, fwd: &ImageForward, grad_fused: &[f64], acc: &mut GradAccumulator) -> Result<()> {
        let alpha = self.state.alpha;
        let grad_s: Vec<f64> = grad_fused.iter().map(|g| alpha * g).collect();
        let from_s = viformer::viformer_backward(
            &self.state.trainable.viformer,
            &fwd.viformer,
            &grad_s,
            &mut acc.viformer,
        )?;
        let grad_z: Vec<f64> = grad_fused
            .iter()
            .zip(&from_s)
            .map(|(g, s)| (1.0 - alpha) * g + s)
            .collect();
        self.visual.backward(&fwd.visual, &grad_z, &mut acc.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, finite_difference_check};
    use crate::seeding;
    use rand::Rng as _;

    fn random_matrix(r: usize, c: usize, s: f64, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
    }

    fn text(d: usize, rng: &mut Rng) -> TextEncoder {
        TextEncoder {
            weight: random_matrix(d, text::TEXT_BUCKETS, 1.0, rng),
        }
    }

    fn perturbed(mut state: ModelState, rng: &mut Rng) -> ModelState {
        for s in state.trainable.slices_mut() {
            for v in s.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        state.trainable.log_tau = 0.5f64.ln();
        state
    }

    #[test]
    fn identity_linear_encoder_passes_input_through() {
        let mut rng = seeding::stream(1, "m");
        let st = ModelState::new(
            VisualBase::Linear { w: Matrix::identity(2) },
            TextEncoder {
                weight: Matrix::zeros(2, 4),
            },
            1,
            0.0,
            0.07,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(st.encode_image(&[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn fresh_model_equals_frozen_base_bitwise() {
        let mut rng = seeding::stream(2, "m");
        for arch in [Architecture::Linear, Architecture::SingleAttentionBlock] {
            let visual = match arch {
                Architecture::Linear => VisualBase::Linear {
                    w: random_matrix(6, 12, 1.0, &mut rng),
                },
                Architecture::SingleAttentionBlock => VisualBase::Attention {
                    wq: random_matrix(4, 4, 1.0, &mut rng),
                    wk: random_matrix(4, 4, 1.0, &mut rng),
                    wv: random_matrix(4, 4, 1.0, &mut rng),
                    wo: random_matrix(4, 4, 1.0, &mut rng),
                    proj: random_matrix(6, 4, 1.0, &mut rng),
                    token_count: 3,
                },
            };
            for alpha in [0.0, 0.1] {
                let st = ModelState::new(visual.clone(), text(6, &mut rng), 2, alpha, 0.07, false, &mut rng).unwrap();
                let enc = st.image_encoder().unwrap();
                for _ in 0..20 {
                    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let got = enc.encode(&x).unwrap();
                    let base = st.base_image_embedding(&x).unwrap();
                    if alpha == 0.0 {
                        assert_eq!(got, base);
                    } else {
                        // Identity-at-init block: α·z + (1−α)·z up to rounding.
                        for (a, b) in got.iter().zip(&base) {
                            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                        }
                    }
                    assert_eq!(enc.encode(&x).unwrap(), got);
                }
            }
        }
    }

    #[test]
    fn text_encoding_is_case_insensitive_and_deterministic() {
        let mut rng = seeding::stream(3, "m");
        let st = ModelState::new(
            VisualBase::Linear {
                w: random_matrix(8, 10, 1.0, &mut rng),
            },
            text(8, &mut rng),
            2,
            0.1,
            0.07,
            false,
            &mut rng,
        )
        .unwrap();
        let a = st.encode_text("A photo of a Dog").unwrap();
        assert_eq!(a, st.encode_text("a photo of a dog").unwrap());
        assert_eq!(a, st.encode_text("A photo of a Dog").unwrap());
        assert_ne!(a, st.encode_text("a photo of a chair").unwrap());
        assert!(st.encode_text("").is_err());
    }

    #[test]
    fn input_dim_mismatch_rejected() {
        let mut rng = seeding::stream(4, "m");
        let st = ModelState::new(
            VisualBase::Linear {
                w: random_matrix(4, 6, 1.0, &mut rng),
            },
            text(4, &mut rng),
            2,
            0.1,
            0.07,
            false,
            &mut rng,
        )
        .unwrap();
        assert!(matches!(st.encode_image(&[1.0; 5]), Err(OvtError::Dimension { .. })));
    }

    #[test]
    fn flatten_round_trip_and_groups() {
        let mut rng = seeding::stream(5, "m");
        let st = ModelState::new(
            VisualBase::Linear {
                w: random_matrix(4, 6, 1.0, &mut rng),
            },
            text(4, &mut rng),
            2,
            0.1,
            0.07,
            true,
            &mut rng,
        )
        .unwrap();
        let st = perturbed(st, &mut rng);
        let flat = st.trainable.flatten(true);
        let mut copy = st.trainable.zeros_like();
        copy.unflatten(&flat, true).unwrap();
        assert_eq!(copy, st.trainable);
        let groups = st.trainable.groups(true);
        assert_eq!(groups.last().unwrap().0, "log_tau");
        assert_eq!(groups.last().unwrap().1.end, flat.len());
        assert_eq!(st.trainable.num_params(true), flat.len());
    }

    /// `L = w · encode(x)` summed over a few inputs, checked against central differences.
    fn check_encoder_gradients(state: ModelState, inputs: &[Vec<f64>], rng: &mut Rng) {
        let d = state.embed_dim();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let enc = state.image_encoder().unwrap();
        let mut acc = GradAccumulator::new(&state);
        for x in inputs {
            let f = enc.forward(x).unwrap();
            enc.backward(&f, &w, &mut acc).unwrap();
        }
        let grads = acc.finish(&state).unwrap();
        let analytic = grads.flatten(false);
        let params = state.trainable.flatten(false);
        let report = finite_difference_check(
            |p| {
                let mut s = state.clone();
                s.trainable.unflatten(p, false)?;
                let enc = s.image_encoder()?;
                let mut total = 0.0;
                for x in inputs {
                    total += dot(&enc.encode(x)?, &w);
                }
                Ok(total)
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-4), "max rel err {:e}", report.max_relative_error);
    }

    #[test]
    fn linear_encoder_gradients() {
        let mut rng = seeding::stream(6, "m");
        let st = ModelState::new(
            VisualBase::Linear {
                w: random_matrix(5, 7, 1.0, &mut rng),
            },
            text(5, &mut rng),
            2,
            0.3,
            0.07,
            false,
            &mut rng,
        )
        .unwrap();
        let st = perturbed(st, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        check_encoder_gradients(st, &inputs, &mut rng);
    }

    #[test]
    fn attention_encoder_gradients() {
        let mut rng = seeding::stream(7, "m");
        let visual = VisualBase::Attention {
            wq: random_matrix(4, 4, 1.0, &mut rng),
            wk: random_matrix(4, 4, 1.0, &mut rng),
            wv: random_matrix(4, 4, 1.0, &mut rng),
            wo: random_matrix(4, 4, 1.0, &mut rng),
            proj: random_matrix(5, 4, 1.0, &mut rng),
            token_count: 3,
        };
        let st = ModelState::new(visual, text(5, &mut rng), 2, 0.4, 0.07, false, &mut rng).unwrap();
        let st = perturbed(st, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        check_encoder_gradients(st, &inputs, &mut rng);
    }

    #[test]
    fn checksum_tracks_frozen_weights_only() {
        let mut rng = seeding::stream(8, "m");
        let st = ModelState::new(
            VisualBase::Linear {
                w: random_matrix(4, 6, 1.0, &mut rng),
            },
            text(4, &mut rng),
            2,
            0.1,
            0.07,
            false,
            &mut rng,
        )
        .unwrap();
        let before = st.frozen_checksum();
        let tuned = perturbed(st.clone(), &mut rng);
        assert_eq!(tuned.frozen_checksum(), before);
        let mut broken = st;
        if let VisualBase::Linear { w } = &mut broken.visual {
            w.data_mut()[0] += 1e-12;
        }
        assert_ne!(broken.frozen_checksum(), before);
    }
}
