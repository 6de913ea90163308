//! Central-difference checks of the contrastive loss, the consistency loss,
//! and the full training objective through adapters and the fusion block.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::{finite_difference_check, Matrix};
use crate::losses::{itc_loss, vc_loss, ItcBatch, MarginMode, VcBatch};
use crate::model::encoder::VisualBase;
use crate::model::pretrain::random_text_encoder;
use crate::model::ModelState;
use crate::seeding::{self, Rng};
use crate::synthdata::{MultiViewDataset, ViewRecord};
use crate::trainer::{batch_loss, Sample, TrainConfig, TrainData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Random configurations per check.
    pub configurations: usize,
    pub max_dim: usize,
    pub max_batch: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            configurations: 20,
            max_dim: 16,
            max_batch: 8,
            step: 1e-4,
            tolerance: 1e-4,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.configurations == 0 {
            return Err(OvtError::Config("gradcheck.configurations must be >= 1".into()));
        }
        if self.max_dim < 4 || self.max_batch < 2 {
            return Err(OvtError::Config(
                "gradcheck.max_dim must be >= 4 and gradcheck.max_batch >= 2".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(OvtError::Config(format!(
                "gradcheck.tolerance {} must be > 0",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Worst relative error seen for one parameter group of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub check: String,
    pub group: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub configurations: usize,
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<22} {:<18} {:>12}  status\n", "check", "group", "max_rel_err");
        for g in &self.groups {
            s.push_str(&format!(
                "{:<22} {:<18} {:>12.3e}  {}\n",
                g.check,
                g.group,
                g.max_relative_error,
                if g.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

#[derive(Default)]
struct Tally(Vec<(String, String, f64)>);

impl Tally {
    fn record(&mut self, check: &str, group: &str, err: f64) {
        match self.0.iter_mut().find(|(c, g, _)| c == check && g == group) {
            Some(e) => e.2 = e.2.max(err),
            None => self.0.push((check.to_string(), group.to_string(), err)),
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn corrupt_first(grad: &mut [f64]) {
    if let Some(g) = grad.first_mut() {
        *g = *g * 1.01 + 1e-3;
    }
}

fn check_itc(cfg: &GradCheckConfig, rng: &mut Rng, corrupt: bool, tally: &mut Tally) -> Result<()> {
    let d = rng.random_range(2..=cfg.max_dim);
    let n = rng.random_range(1..=cfg.max_batch);
    let tau: f64 = rng.random_range(0.05..1.0);
    let image = Matrix::from_fn(n, d, |_, _| normal(rng));
    let text = Matrix::from_fn(n, d, |_, _| normal(rng));
    let out = itc_loss(&ItcBatch {
        image: image.clone(),
        text: text.clone(),
        tau,
    })?;
    let mut params = image.data().to_vec();
    params.extend_from_slice(text.data());
    params.push(tau.ln());
    let mut analytic = out.grad_image.data().to_vec();
    analytic.extend_from_slice(out.grad_text.data());
    analytic.push(out.grad_log_tau);
    if corrupt {
        corrupt_first(&mut analytic);
    }
    let nd = n * d;
    let report = finite_difference_check(
        |p| {
            let batch = ItcBatch {
                image: Matrix::from_vec(n, d, p[..nd].to_vec())?,
                text: Matrix::from_vec(n, d, p[nd..2 * nd].to_vec())?,
                tau: p[2 * nd].exp(),
            };
            Ok(itc_loss(&batch)?.loss)
        },
        &params,
        &analytic,
        cfg.step,
    )?;
    tally.record("itc", "image", report.max_in(0..nd));
    tally.record("itc", "text", report.max_in(nd..2 * nd));
    tally.record("itc", "log_tau", report.max_in(2 * nd..2 * nd + 1));
    Ok(())
}

fn check_vc(cfg: &GradCheckConfig, rng: &mut Rng, corrupt: bool, tally: &mut Tally) -> Result<()> {
    let d = rng.random_range(2..=cfg.max_dim);
    let n = rng.random_range(1..=cfg.max_batch);
    for mode in [MarginMode::Additive, MarginMode::Hinge] {
        // Keep the hinge active so the check exercises a non-zero gradient.
        let margin = match mode {
            MarginMode::Additive => rng.random_range(0.0..0.3),
            MarginMode::Hinge => -rng.random_range(0.0..0.3),
        };
        let anchors: Vec<Vec<f64>> = (0..n).map(|_| random_vec(rng, d)).collect();
        let zs: Vec<Vec<f64>> = (0..n).map(|_| random_vec(rng, d)).collect();
        let build = |flat: &[f64]| VcBatch {
            pairs: flat
                .chunks(d)
                .map(|z| z.to_vec())
                .zip(anchors.iter().cloned())
                .collect(),
            margin,
            mode,
        };
        let params: Vec<f64> = zs.concat();
        let out = vc_loss(&build(&params))?;
        let mut analytic = out.grads.concat();
        if corrupt {
            corrupt_first(&mut analytic);
        }
        let report = finite_difference_check(|p| Ok(vc_loss(&build(p))?.loss), &params, &analytic, cfg.step)?;
        let group = match mode {
            MarginMode::Additive => "z (additive)",
            MarginMode::Hinge => "z (hinge)",
        };
        tally.record("vc", group, report.max_relative_error);
    }
    Ok(())
}

fn random_state(rng: &mut Rng, input_dim: usize, d: usize, attention: bool) -> Result<ModelState> {
    let text = random_text_encoder(d, rng);
    let visual = if attention {
        let t = 2;
        let scale = (t as f64 / input_dim as f64).sqrt();
        let sq = |rng: &mut Rng| Matrix::from_fn(input_dim / t, input_dim / t, |_, _| scale * normal(rng));
        VisualBase::Attention {
            wq: sq(rng),
            wk: sq(rng),
            wv: sq(rng),
            wo: sq(rng),
            proj: Matrix::from_fn(d, input_dim / t, |_, _| scale * normal(rng)),
            token_count: t,
        }
    } else {
        let scale = (input_dim as f64).sqrt().recip();
        VisualBase::Linear {
            w: Matrix::from_fn(d, input_dim, |_, _| scale * normal(rng)),
        }
    };
    let smallest = if attention { input_dim / 2 } else { d.min(input_dim) };
    let rank = rng.random_range(1..smallest.min(5));
    let alpha = rng.random_range(0.05..0.9);
    let mut state = ModelState::new(visual, text, rank, alpha, 0.3, true, rng)?;
    // Move off the identity initialization so every branch carries gradient.
    for s in state.trainable.slices_mut() {
        for v in s.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    state.trainable.log_tau = rng.random_range(0.1f64..1.0).ln();
    Ok(state)
}

fn check_composite(cfg: &GradCheckConfig, rng: &mut Rng, index: usize, corrupt: bool, tally: &mut Tally) -> Result<()> {
    let d = rng.random_range(2..=cfg.max_dim);
    let n = rng.random_range(2..=cfg.max_batch);
    let input_dim = 2 * rng.random_range(2..=(cfg.max_dim / 2).max(2));
    let attention = index % 2 == 1;
    let state = random_state(rng, input_dim, d, attention)?;
    let categories = ["dog", "chair", "mug"];
    let records: Vec<ViewRecord> = (0..n)
        .map(|i| {
            let category = categories[i % categories.len()].to_string();
            ViewRecord {
                object_id: i % 2,
                view_id: i,
                caption: format!("a photo of a {category} number {i}"),
                category,
                is_hard_view: false,
                raw: random_vec(rng, input_dim),
            }
        })
        .collect();
    let dataset = MultiViewDataset::new(records);
    let data = TrainData::new(&state, &dataset, None, None)?;
    let targets: Vec<Option<Vec<f64>>> = (0..n).map(|i| (i % 2 == 0).then(|| random_vec(rng, d))).collect();
    let train = TrainConfig {
        lambda: rng.random_range(0.1..2.0),
        margin: rng.random_range(0.0..0.2),
        train_temperature: true,
        ..TrainConfig::default()
    };
    let batch: Vec<Sample> = (0..n).map(Sample::Multi).collect();
    let (_, grads) = batch_loss(&state, &data, &targets, &batch, &train, true)?;
    let grads = grads.expect("gradients requested");
    let params = state.trainable.flatten(true);
    let mut analytic = grads.flatten(true);
    if corrupt {
        corrupt_first(&mut analytic);
    }
    let report = finite_difference_check(
        |p| {
            let mut s = state.clone();
            s.trainable.unflatten(p, true)?;
            Ok(batch_loss(&s, &data, &targets, &batch, &train, false)?.0.total)
        },
        &params,
        &analytic,
        cfg.step,
    )?;
    let check = if attention {
        "composite (attention)"
    } else {
        "composite (linear)"
    };
    for (group, range) in state.trainable.groups(true) {
        tally.record(check, &group, report.max_in(range));
    }
    Ok(())
}

/// Runs every check over `cfg.configurations` random configurations.
/// `corrupt` perturbs one analytic gradient entry per check as a negative control.
pub fn run_gradcheck(cfg: &GradCheckConfig, corrupt: bool) -> Result<GradCheckSummary> {
    cfg.validate()?;
    let mut rng = seeding::stream(cfg.seed, "gradcheck");
    let mut tally = Tally::default();
    for i in 0..cfg.configurations {
        check_itc(cfg, &mut rng, corrupt, &mut tally)?;
        check_vc(cfg, &mut rng, corrupt, &mut tally)?;
        check_composite(cfg, &mut rng, i, corrupt, &mut tally)?;
    }
    let groups = tally
        .0
        .into_iter()
        .map(|(check, group, err)| GroupResult {
            passed: err < cfg.tolerance,
            check,
            group,
            max_relative_error: err,
        })
        .collect();
    Ok(GradCheckSummary {
        configurations: cfg.configurations,
        tolerance: cfg.tolerance,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradCheckConfig {
        GradCheckConfig {
            configurations: 4,
            max_dim: 6,
            max_batch: 4,
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn clean_gradients_pass() {
        let s = run_gradcheck(&small(), false).unwrap();
        assert!(s.passed(), "{}", s.table());
        assert!(s.groups.iter().any(|g| g.check == "itc" && g.group == "log_tau"));
        assert!(s
            .groups
            .iter()
            .any(|g| g.check.starts_with("composite") && g.group.ends_with("lora_b")));
    }

    #[test]
    fn corrupted_gradients_fail() {
        let s = run_gradcheck(&small(), true).unwrap();
        assert!(!s.passed());
        assert!(s.table().contains("FAIL"));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GradCheckConfig {
            configurations: 0,
            ..GradCheckConfig::default()
        };
        assert!(run_gradcheck(&cfg, false).is_err());
    }
}
