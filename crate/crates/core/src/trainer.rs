//! Alternating maximization (anchors and outliers from fresh embeddings) and
//! minimization (mini-batch descent on adapters, VIFormer and optionally `log τ`).

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::eval::{group_embeddings, invariance_report, truth_indices, zero_shot_classify, ClassBank};
use crate::linalg::Matrix;
use crate::losses::{itc_loss, total_loss, vc_loss, ItcBatch, MarginMode, VcBatch};
use crate::model::{GradAccumulator, ModelState, Trainable};
use crate::seeding::{self, Rng};
use crate::synthdata::MultiViewDataset;
use crate::viewpoints::{build_plan, EpochPlan, SamplingMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the viewpoint-consistency term.
    pub lambda: f64,
    /// Residual ratio of the VIFormer branch.
    pub alpha: f64,
    /// Outliers per object.
    pub k: usize,
    pub margin: f64,
    pub margin_mode: MarginMode,
    pub lora_rank: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sampling_mode: SamplingMode,
    pub train_temperature: bool,
    /// Share of each batch drawn from single-view clean pairs.
    pub clean_mix_ratio: f64,
    /// Write measured seconds to the log instead of 0.
    pub record_wall_time: bool,
    /// Parallel width of the maximization step; not part of the config file.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.1,
            k: 5,
            margin: 0.0,
            margin_mode: MarginMode::Additive,
            lora_rank: 8,
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            sampling_mode: SamplingMode::Ovt,
            train_temperature: false,
            clean_mix_ratio: 0.5,
            record_wall_time: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(OvtError::Config(m));
        if !(self.lambda >= 0.0) {
            return fail(format!("train.lambda {} must be >= 0", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("train.alpha {} outside [0, 1]", self.alpha));
        }
        if self.k == 0 {
            return fail("train.k must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail(format!(
                "train.learning_rate {} must be finite and >= 0",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("train.momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be >= 1".into());
        }
        if self.lora_rank == 0 {
            return fail("train.lora_rank must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.clean_mix_ratio) {
            return fail(format!("train.clean_mix_ratio {} outside [0, 1]", self.clean_mix_ratio));
        }
        if !self.margin.is_finite() {
            return fail("train.margin must be finite".into());
        }
        Ok(())
    }

    /// `(multi-view, clean)` slots per batch.
    fn batch_split(&self, has_clean: bool) -> (usize, usize) {
        if !has_clean {
            return (self.batch_size, 0);
        }
        let clean = (self.clean_mix_ratio * self.batch_size as f64).round() as usize;
        (self.batch_size - clean.min(self.batch_size), clean.min(self.batch_size))
    }
}

/// `p ← p − η·g`.
pub fn sgd_step(params: &mut Trainable, grads: &Trainable, eta: f64) -> Result<()> {
    let g = grads.named_slices();
    for (name, s) in &g {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(OvtError::NonFinite(format!("gradient of {name}")));
        }
    }
    let mut p = params.slices_mut();
    if p.len() != g.len() {
        return Err(OvtError::dims("sgd_step", p.len(), g.len()));
    }
    for (ps, (name, gs)) in p.iter_mut().zip(&g) {
        if ps.len() != gs.len() {
            return Err(OvtError::dims("sgd_step", format!("{name} of {}", ps.len()), gs.len()));
        }
        for (x, d) in ps.iter_mut().zip(gs.iter()) {
            *x -= eta * d;
        }
    }
    Ok(())
}

/// Plain gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Trainable>,
}

impl Optimizer {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut Trainable, grads: &Trainable) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, self.learning_rate);
        }
        let v = self.velocity.get_or_insert_with(|| grads.zeros_like());
        let mu = self.momentum;
        let mut next = v.clone();
        for (vs, (_, gs)) in next.slices_mut().into_iter().zip(grads.named_slices()) {
            for (x, g) in vs.iter_mut().zip(gs) {
                *x = mu * *x + g;
            }
        }
        sgd_step(params, &next, self.learning_rate)?;
        *v = next;
        Ok(())
    }
}

/// Dataset views and cached text embeddings used throughout a run.
pub struct TrainData<'a> {
    pub multiview: &'a MultiViewDataset,
    pub clean: Option<&'a MultiViewDataset>,
    /// Zero-shot evaluation set for the log.
    pub holdout: Option<&'a MultiViewDataset>,
    multiview_text: Vec<Vec<f64>>,
    clean_text: Vec<Vec<f64>>,
    bank: ClassBank,
}

impl<'a> TrainData<'a> {
    pub fn new(
        state: &ModelState,
        multiview: &'a MultiViewDataset,
        clean: Option<&'a MultiViewDataset>,
        holdout: Option<&'a MultiViewDataset>,
    ) -> Result<Self> {
        if multiview.is_empty() {
            return Err(OvtError::Empty("multi-view training set"));
        }
        let clean = clean.filter(|c| !c.is_empty());
        for (name, d) in [("multi-view", Some(multiview)), ("clean", clean), ("held-out", holdout)] {
            let Some(d) = d else { continue };
            d.check_consistent()?;
            if let Some(dim) = d.input_dim() {
                if dim != state.input_dim() {
                    return Err(OvtError::dims(
                        "training data",
                        format!("{name} records of dim {dim}"),
                        format!("model input_dim {}", state.input_dim()),
                    ));
                }
            }
        }
        let text = |d: &MultiViewDataset| -> Result<Vec<Vec<f64>>> {
            d.records.iter().map(|r| state.encode_text(&r.caption)).collect()
        };
        let mut labels = multiview.categories();
        for extra in [clean, holdout].into_iter().flatten() {
            for l in extra.categories() {
                if !labels.contains(&l) {
                    labels.push(l);
                }
            }
        }
        Ok(Self {
            multiview_text: text(multiview)?,
            clean_text: clean.map(text).transpose()?.unwrap_or_default(),
            bank: ClassBank::from_text(labels, &state.text)?,
            multiview,
            clean,
            holdout,
        })
    }
}

/// Fused embeddings of every record; `threads > 1` uses a dedicated pool.
pub fn embed_all(state: &ModelState, dataset: &MultiViewDataset, threads: usize) -> Result<Vec<Vec<f64>>> {
    let enc = state.image_encoder()?;
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| OvtError::Config(format!("thread pool: {e}")))?;
        pool.install(|| dataset.records.par_iter().map(|r| enc.encode(&r.raw)).collect())
    } else {
        dataset.records.iter().map(|r| enc.encode(&r.raw)).collect()
    }
}

/// Anchor for every multi-view record that is a selected outlier.
pub fn outlier_targets(dataset: &MultiViewDataset, plan: &EpochPlan) -> Vec<Option<Vec<f64>>> {
    let mut targets = vec![None; dataset.len()];
    for g in dataset.objects() {
        if let Some(p) = plan.objects.get(&g.object_id) {
            for &row in &p.outliers {
                targets[g.indices[row]] = Some(p.anchor.clone());
            }
        }
    }
    targets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sample {
    Multi(usize),
    Clean(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub itc: f64,
    pub vc: f64,
    pub total: f64,
    pub vc_pairs: usize,
}

/// Loss of one batch and, if asked, its gradient with respect to the trainable parameters.
pub fn batch_loss(
    state: &ModelState,
    data: &TrainData<'_>,
    targets: &[Option<Vec<f64>>],
    batch: &[Sample],
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(BatchLoss, Option<Trainable>)> {
    let enc = state.image_encoder()?;
    let mut forwards = Vec::with_capacity(batch.len());
    let mut text_rows = Vec::with_capacity(batch.len());
    for s in batch {
        let (raw, text) = match *s {
            Sample::Multi(i) => (&data.multiview.records[i].raw, &data.multiview_text[i]),
            Sample::Clean(i) => {
                let clean = data.clean.ok_or(OvtError::Empty("clean set"))?;
                (&clean.records[i].raw, &data.clean_text[i])
            }
        };
        let f = enc.forward(raw)?;
        if f.fused.iter().any(|v| !v.is_finite()) {
            return Err(OvtError::NonFinite(format!("embedding of {s:?}")));
        }
        forwards.push(f);
        text_rows.push(text.clone());
    }
    let image = Matrix::from_rows(&forwards.iter().map(|f| f.fused.clone()).collect::<Vec<_>>())?;
    let itc = itc_loss(&ItcBatch {
        image,
        text: Matrix::from_rows(&text_rows)?,
        tau: state.tau(),
    })?;

    let mut pairs = Vec::new();
    let mut pair_rows = Vec::new();
    for (row, s) in batch.iter().enumerate() {
        if let Sample::Multi(i) = *s {
            if let Some(anchor) = &targets[i] {
                pairs.push((forwards[row].fused.clone(), anchor.clone()));
                pair_rows.push(row);
            }
        }
    }
    let vc = vc_loss(&VcBatch {
        pairs,
        margin: cfg.margin,
        mode: cfg.margin_mode,
    })?;
    let loss = BatchLoss {
        itc: itc.loss,
        vc: vc.loss,
        total: total_loss(itc.loss, vc.loss, cfg.lambda)?,
        vc_pairs: pair_rows.len(),
    };
    if !with_grads {
        return Ok((loss, None));
    }
    let mut grad_fused = itc.grad_image;
    for (row, g) in pair_rows.iter().zip(&vc.grads) {
        for (x, y) in grad_fused.row_mut(*row).iter_mut().zip(g) {
            *x += cfg.lambda * y;
        }
    }
    let mut acc = GradAccumulator::new(state);
    for (row, f) in forwards.iter().enumerate() {
        enc.backward(f, grad_fused.row(row), &mut acc)?;
    }
    acc.log_tau = itc.grad_log_tau;
    Ok((loss, Some(acc.finish(state)?)))
}

/// Shuffled mini-batches for one epoch. Clean pairs cycle through a reshuffled
/// stream when the clean set is smaller than needed.
pub fn epoch_batches(data: &TrainData<'_>, cfg: &TrainConfig, rng: &mut Rng) -> Vec<Vec<Sample>> {
    let (n_multi, n_clean) = cfg.batch_split(data.clean.is_some());
    let clean_len = data.clean.map_or(0, MultiViewDataset::len);
    let mut multi: Vec<usize> = (0..data.multiview.len()).collect();
    multi.shuffle(rng);
    let mut clean_order: Vec<usize> = Vec::new();
    let mut next_clean = |rng: &mut Rng| {
        if clean_order.is_empty() {
            clean_order = (0..clean_len).collect();
            clean_order.shuffle(rng);
            clean_order.reverse();
        }
        clean_order.pop().expect("non-empty clean set")
    };
    let mut batches = Vec::new();
    if n_multi == 0 {
        // Clean-only batches; one pass over the clean set.
        let mut order: Vec<usize> = (0..clean_len).collect();
        order.shuffle(rng);
        for chunk in order.chunks(n_clean) {
            batches.push(chunk.iter().map(|&i| Sample::Clean(i)).collect());
        }
        return batches;
    }
    for chunk in multi.chunks(n_multi) {
        let mut b: Vec<Sample> = chunk.iter().map(|&i| Sample::Multi(i)).collect();
        for _ in 0..n_clean {
            b.push(Sample::Clean(next_clean(rng)));
        }
        batches.push(b);
    }
    batches
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub itc: f64,
    pub vc: f64,
    pub total: f64,
    pub batches: usize,
    pub outlier_mean_distance: f64,
    pub plan_digest: String,
}

/// Maximization then minimization over one epoch.
pub fn run_epoch(
    state: &mut ModelState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
    shuffle_rng: &mut Rng,
    sampling_rng: &mut Rng,
    epoch: usize,
) -> Result<EpochOutcome> {
    let embeddings = embed_all(state, data.multiview, cfg.threads)?;
    let objects = group_embeddings(data.multiview, &embeddings)?;
    let plan = build_plan(&objects, cfg.k, cfg.sampling_mode, sampling_rng, cfg.threads)?;
    let digest = plan.digest();
    let targets = outlier_targets(data.multiview, &plan);

    let batches = epoch_batches(data, cfg, shuffle_rng);
    let (mut itc, mut vc, mut total) = (0.0, 0.0, 0.0);
    for (b, batch) in batches.iter().enumerate() {
        let (loss, grads) = batch_loss(state, data, &targets, batch, cfg, true).map_err(|e| match e {
            OvtError::NonFinite(_) | OvtError::Normalization { .. } => {
                OvtError::NonFinite(format!("epoch {epoch} batch {b} ({} samples): {e}", batch.len()))
            }
            other => other,
        })?;
        if !loss.total.is_finite() {
            return Err(OvtError::NonFinite(format!(
                "loss {} at epoch {epoch} batch {b} ({} samples)",
                loss.total,
                batch.len()
            )));
        }
        let grads = grads.expect("gradients requested");
        optimizer.step(&mut state.trainable, &grads).map_err(|e| match e {
            OvtError::NonFinite(m) => OvtError::NonFinite(format!("{m} at epoch {epoch} batch {b}")),
            other => other,
        })?;
        if state.train_temperature {
            state.clamp_temperature();
        }
        itc += loss.itc;
        vc += loss.vc;
        total += loss.total;
    }
    debug_assert_eq!(plan.digest(), digest);
    let n = batches.len().max(1) as f64;
    Ok(EpochOutcome {
        itc: itc / n,
        vc: vc / n,
        total: total / n,
        batches: batches.len(),
        outlier_mean_distance: plan.mean_outlier_distance(),
        plan_digest: digest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub itc_loss: f64,
    pub vc_loss: f64,
    pub total_loss: f64,
    /// Mean over objects of the largest pairwise view distance.
    pub mean_intra_object_distance: f64,
    pub outlier_mean_distance: f64,
    pub zero_shot_top1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const CSV_HEADER: &str =
    "epoch,itc_loss,vc_loss,total_loss,mean_intra_object_distance,outlier_mean_distance,zero_shot_top1,seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.itc_loss,
                r.vc_loss,
                r.total_loss,
                r.mean_intra_object_distance,
                r.outlier_mean_distance,
                r.zero_shot_top1,
                r.seconds
            );
        }
        out
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Invariance on the multi-view set and zero-shot top-1 on the held-out set
/// (or the clean set, or the multi-view set, whichever exists first).
pub fn diagnostics(state: &ModelState, data: &TrainData<'_>, threads: usize) -> Result<(f64, f64)> {
    let emb = embed_all(state, data.multiview, threads)?;
    let inv = invariance_report(&group_embeddings(data.multiview, &emb)?, 0.0)?;
    let zs_set = data
        .holdout
        .filter(|h| !h.is_empty())
        .or(data.clean)
        .unwrap_or(data.multiview);
    let zs_emb = embed_all(state, zs_set, threads)?;
    let truths = truth_indices(zs_set, &data.bank)?;
    let zs = zero_shot_classify(&Matrix::from_rows(&zs_emb)?, &truths, &data.bank, &[1], state.tau())?;
    Ok((inv.mean_max_distance, zs.top(1).unwrap_or(0.0)))
}

/// Loss of the current state over sequential (unshuffled) batches, without updates.
pub fn evaluate_losses(
    state: &ModelState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    plan: &EpochPlan,
) -> Result<BatchLoss> {
    let targets = outlier_targets(data.multiview, plan);
    let (n_multi, n_clean) = cfg.batch_split(data.clean.is_some());
    let clean_len = data.clean.map_or(0, MultiViewDataset::len);
    let mut sum = BatchLoss::default();
    let mut count = 0usize;
    let mut c = 0usize;
    let multi: Vec<usize> = (0..data.multiview.len()).collect();
    let chunks: Vec<&[usize]> = if n_multi == 0 {
        Vec::new()
    } else {
        multi.chunks(n_multi).collect()
    };
    for chunk in chunks {
        let mut b: Vec<Sample> = chunk.iter().map(|&i| Sample::Multi(i)).collect();
        for _ in 0..n_clean {
            b.push(Sample::Clean(c % clean_len));
            c += 1;
        }
        let (l, _) = batch_loss(state, data, &targets, &b, cfg, false)?;
        sum.itc += l.itc;
        sum.vc += l.vc;
        sum.total += l.total;
        sum.vc_pairs += l.vc_pairs;
        count += 1;
    }
    let n = count.max(1) as f64;
    Ok(BatchLoss {
        itc: sum.itc / n,
        vc: sum.vc / n,
        total: sum.total / n,
        vc_pairs: sum.vc_pairs,
    })
}

/// Runs `cfg.epochs` epochs. The log's first row (epoch 0) describes the
/// untouched state.
pub fn fit(
    mut state: ModelState,
    multiview: &MultiViewDataset,
    clean: Option<&MultiViewDataset>,
    holdout: Option<&MultiViewDataset>,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(OvtError::Config("train.epochs must be >= 1".into()));
    }
    let clean = if cfg.clean_mix_ratio > 0.0 { clean } else { None };
    let data = TrainData::new(&state, multiview, clean, holdout)?;
    let mut shuffle_rng = seeding::stream(cfg.seed, "shuffle");
    let mut sampling_rng = seeding::stream(cfg.seed, "sampling");
    let mut optimizer = Optimizer::new(cfg.learning_rate, cfg.momentum);
    let mut log = TrainLog::default();
    let seconds = |t: Instant| {
        if cfg.record_wall_time {
            t.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };

    let start = Instant::now();
    let emb = embed_all(&state, multiview, cfg.threads)?;
    let plan0 = crate::viewpoints::build_epoch_plan(&group_embeddings(multiview, &emb)?, cfg.k, cfg.threads)?;
    let l0 = evaluate_losses(&state, &data, cfg, &plan0)?;
    let (inv0, zs0) = diagnostics(&state, &data, cfg.threads)?;
    log.records.push(EpochRecord {
        epoch: 0,
        itc_loss: l0.itc,
        vc_loss: l0.vc,
        total_loss: l0.total,
        mean_intra_object_distance: inv0,
        outlier_mean_distance: plan0.mean_outlier_distance(),
        zero_shot_top1: zs0,
        seconds: seconds(start),
    });

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let out = run_epoch(
            &mut state,
            &data,
            cfg,
            &mut optimizer,
            &mut shuffle_rng,
            &mut sampling_rng,
            epoch,
        )?;
        let (inv, zs) = diagnostics(&state, &data, cfg.threads)?;
        log.records.push(EpochRecord {
            epoch,
            itc_loss: out.itc,
            vc_loss: out.vc,
            total_loss: out.total,
            mean_intra_object_distance: inv,
            outlier_mean_distance: out.outlier_mean_distance,
            zero_shot_top1: zs,
            seconds: seconds(start),
        });
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pretrain::{build_model, ModelConfig};
    use crate::synthdata::{generate_splits, GenSpec, Splits};

    fn small() -> (Splits, ModelState, TrainConfig) {
        let spec = GenSpec {
            num_categories: 4,
            objects_per_category: 2,
            views_per_object: 6,
            input_dim: 48,
            clean_objects_per_category: 3,
            holdout_objects_per_category: 2,
            seed: 3,
            ..GenSpec::default()
        };
        let splits = generate_splits(&spec).unwrap();
        let mcfg = ModelConfig {
            embed_dim: 8,
            nuisance_rank: 2,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            lora_rank: 2,
            batch_size: 8,
            epochs: 2,
            k: 2,
            ..TrainConfig::default()
        };
        let state = build_model(
            &mcfg,
            48,
            cfg.lora_rank,
            cfg.alpha,
            cfg.train_temperature,
            &splits.clean,
            1,
        )
        .unwrap();
        (splits, state, cfg)
    }

    #[test]
    fn sgd_step_cases() {
        let (_, state, _) = small();
        let mut p = state.trainable.clone();
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, 0.1).unwrap();
        assert_eq!(p, state.trainable);
        let mut g = p.zeros_like();
        g.viformer.wq.data_mut()[0] = 2.0;
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, state.trainable);
        p.viformer.wq.data_mut()[0] = 1.0;
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.viformer.wq.data()[0] - 0.8).abs() < 1e-15);
        g.log_tau = f64::NAN;
        assert!(matches!(sgd_step(&mut p, &g, 0.1), Err(OvtError::NonFinite(_))));
    }

    #[test]
    fn zero_step_epoch_leaves_parameters_bitwise() {
        let (splits, state, cfg) = small();
        let cfg = TrainConfig {
            lambda: 0.0,
            learning_rate: 0.0,
            momentum: 0.0,
            ..cfg
        };
        let (after, log) = fit(
            state.clone(),
            &splits.multiview,
            Some(&splits.clean),
            Some(&splits.holdout),
            &cfg,
        )
        .unwrap();
        assert_eq!(after, state);
        assert_eq!(log.records.len(), cfg.epochs + 1);
        assert_eq!(log.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn small_step_descends_on_its_batch() {
        let (splits, mut state, cfg) = small();
        // Move off the symmetric start so every parameter group has gradient.
        state.trainable.viformer.wo.fill(0.05);
        let data = TrainData::new(&state, &splits.multiview, Some(&splits.clean), None).unwrap();
        let emb = embed_all(&state, &splits.multiview, 1).unwrap();
        let plan =
            crate::viewpoints::build_epoch_plan(&group_embeddings(&splits.multiview, &emb).unwrap(), cfg.k, 1).unwrap();
        let targets = outlier_targets(&splits.multiview, &plan);
        let batch = epoch_batches(&data, &cfg, &mut seeding::stream(0, "t")).remove(0);
        let (before, grads) = batch_loss(&state, &data, &targets, &batch, &cfg, true).unwrap();
        let grads = grads.unwrap();
        let mut eta = 1e-2;
        loop {
            let mut p = state.clone();
            sgd_step(&mut p.trainable, &grads, eta).unwrap();
            let (after, _) = batch_loss(&p, &data, &targets, &batch, &cfg, false).unwrap();
            if after.total < before.total {
                break;
            }
            eta /= 2.0;
            assert!(eta > 1e-12, "no descent found");
        }
    }

    #[test]
    fn fit_is_deterministic_and_keeps_frozen_weights() {
        let (splits, state, cfg) = small();
        let checksum = state.frozen_checksum();
        let run = || {
            fit(
                state.clone(),
                &splits.multiview,
                Some(&splits.clean),
                Some(&splits.holdout),
                &cfg,
            )
            .unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la.to_csv(), lb.to_csv());
        assert_eq!(a, b);
        assert_eq!(a.frozen_checksum(), checksum);
        assert_ne!(a.trainable, state.trainable);
    }

    #[test]
    fn parallel_maximization_matches_sequential() {
        let (splits, state, cfg) = small();
        let seq = fit(state.clone(), &splits.multiview, Some(&splits.clean), None, &cfg).unwrap();
        let par = fit(
            state,
            &splits.multiview,
            Some(&splits.clean),
            None,
            &TrainConfig { threads: 3, ..cfg },
        )
        .unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn fit_preconditions() {
        let (splits, state, cfg) = small();
        let zero = TrainConfig {
            epochs: 0,
            ..cfg.clone()
        };
        assert!(fit(state.clone(), &splits.multiview, None, None, &zero).is_err());
        let empty = MultiViewDataset::default();
        assert!(matches!(
            fit(state.clone(), &empty, None, None, &cfg),
            Err(OvtError::Empty(_))
        ));
        let mut wrong = splits.multiview.clone();
        for r in &mut wrong.records {
            r.raw.push(0.0);
        }
        assert!(matches!(
            fit(state, &wrong, None, None, &cfg),
            Err(OvtError::Dimension { .. })
        ));
    }

    #[test]
    fn batch_composition_follows_mix_ratio() {
        let (splits, state, cfg) = small();
        let data = TrainData::new(&state, &splits.multiview, Some(&splits.clean), None).unwrap();
        let batches = epoch_batches(&data, &cfg, &mut seeding::stream(1, "t"));
        let multi: usize = batches
            .iter()
            .flatten()
            .filter(|s| matches!(s, Sample::Multi(_)))
            .count();
        assert_eq!(multi, splits.multiview.len());
        assert!(batches[0].iter().filter(|s| matches!(s, Sample::Clean(_))).count() == 4);
        let no_clean = TrainData::new(&state, &splits.multiview, None, None).unwrap();
        let pure = epoch_batches(
            &no_clean,
            &TrainConfig {
                clean_mix_ratio: 0.0,
                ..cfg
            },
            &mut seeding::stream(1, "t"),
        );
        assert!(pure.iter().flatten().all(|s| matches!(s, Sample::Multi(_))));
    }

    #[test]
    fn divergence_aborts_naming_the_batch() {
        let (splits, state, cfg) = small();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            momentum: 0.0,
            ..cfg
        };
        let err = fit(state, &splits.multiview, None, None, &cfg).unwrap_err();
        assert!(matches!(err, OvtError::NonFinite(_)), "{err}");
        assert!(err.to_string().contains("batch"), "{err}");
    }

    #[test]
    fn trainable_fraction_is_small_at_default_scale() {
        let spec = GenSpec::default();
        let splits = generate_splits(&spec).unwrap();
        let cfg = TrainConfig::default();
        let state = build_model(
            &ModelConfig::default(),
            spec.input_dim,
            cfg.lora_rank,
            cfg.alpha,
            false,
            &splits.clean,
            0,
        )
        .unwrap();
        let (total, trainable) = state.param_counts();
        assert_eq!(trainable, state.trainable.num_params(false));
        assert!((trainable as f64) / (total as f64) < 0.5, "{trainable}/{total}");
    }
}
