//! Commands behind the `ovt` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ovt_core::config::ExperimentConfig;
use ovt_core::eval::{evaluate_model, EvalReport};
use ovt_core::gradcheck::{run_gradcheck, GradCheckSummary};
use ovt_core::model::checkpoint;
use ovt_core::model::pretrain::build_model;
use ovt_core::synthdata::{generate_splits, read_jsonl, write_jsonl, MultiViewDataset, Splits};
use ovt_core::trainer::{fit, EpochRecord, TrainConfig, TrainLog};
use ovt_core::viewpoints::SamplingMode;
use ovt_core::{OvtError, Result};
use serde::Serialize;

pub const THREADS_ENV: &str = "OVT_THREADS";
pub const MULTIVIEW_FILE: &str = "multiview.jsonl";
pub const CLEAN_FILE: &str = "clean.jsonl";
pub const HOLDOUT_FILE: &str = "holdout.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const COMPARE_FILE: &str = "compare.csv";

/// Width of the parallel maximization step: `OVT_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(OvtError::Config(format!(
                "{THREADS_ENV}={v:?} must be a positive integer"
            ))),
        },
    }
}

/// Loads the config file (if any), applies overrides, then seed and output flags.
pub fn resolve_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    cfg.finalize()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| OvtError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn read_split(dir: &Path, name: &str) -> Result<MultiViewDataset> {
    let path = dir.join(name);
    read_jsonl(&path).map_err(|e| match e {
        OvtError::Io(io) => OvtError::Config(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn read_optional(dir: &Path, name: &str) -> Result<Option<MultiViewDataset>> {
    if dir.join(name).exists() {
        read_split(dir, name).map(Some)
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub multiview: usize,
    pub clean: usize,
    pub holdout: usize,
    pub objects: usize,
    pub hard_views: usize,
}

pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<GenSummary> {
    let splits = generate_splits(&cfg.gen)?;
    create_dir(out)?;
    write_jsonl(&splits.multiview, &out.join(MULTIVIEW_FILE))?;
    write_jsonl(&splits.clean, &out.join(CLEAN_FILE))?;
    write_jsonl(&splits.holdout, &out.join(HOLDOUT_FILE))?;
    Ok(GenSummary {
        multiview: splits.multiview.len(),
        clean: splits.clean.len(),
        holdout: splits.holdout.len(),
        objects: splits.multiview.objects().len(),
        hard_views: splits.multiview.records.iter().filter(|r| r.is_hard_view).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub total_params: usize,
    pub trainable_params: usize,
    pub frozen_checksum: String,
    pub initial: EpochRecord,
    pub last: EpochRecord,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

fn train_on(
    cfg: &ExperimentConfig,
    train: &TrainConfig,
    splits: &Splits,
) -> Result<(ovt_core::model::ModelState, TrainLog)> {
    if splits.clean.is_empty() {
        return Err(OvtError::Empty("clean set (needed to build the pretrained base)"));
    }
    let input_dim = splits
        .multiview
        .input_dim()
        .ok_or(OvtError::Empty("multi-view training set"))?;
    let state = build_model(
        &cfg.model,
        input_dim,
        train.lora_rank,
        train.alpha,
        train.train_temperature,
        &splits.clean,
        train.seed,
    )?;
    let holdout = (!splits.holdout.is_empty()).then_some(&splits.holdout);
    fit(state, &splits.multiview, Some(&splits.clean), holdout, train)
}

/// Trains on the splits in `data`, writing metrics, checkpoint and the resolved config to `out`.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path, threads: usize) -> Result<TrainSummary> {
    let splits = Splits {
        multiview: read_split(data, MULTIVIEW_FILE)?,
        clean: read_split(data, CLEAN_FILE)?,
        holdout: read_optional(data, HOLDOUT_FILE)?.unwrap_or_else(|| MultiViewDataset::new(Vec::new())),
    };
    let train = TrainConfig {
        threads,
        ..cfg.train.clone()
    };
    create_dir(out)?;
    let (state, log) = train_on(cfg, &train, &splits)?;
    let metrics = out.join(METRICS_FILE);
    let ckpt = out.join(CHECKPOINT_FILE);
    fs::write(&metrics, log.to_csv())?;
    checkpoint::save(&state, cfg.seed, &ckpt)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json_pretty()? + "\n")?;
    let (total, trainable) = state.param_counts();
    Ok(TrainSummary {
        total_params: total,
        trainable_params: trainable,
        frozen_checksum: state.frozen_checksum(),
        initial: log.first().cloned().ok_or(OvtError::Empty("training log"))?,
        last: log.last().cloned().ok_or(OvtError::Empty("training log"))?,
        metrics,
        checkpoint: ckpt,
    })
}

/// Evaluates a checkpoint on the multi-view split in `data`, with the
/// held-out split (when present) for clean zero-shot and the adaptive threshold.
pub fn cmd_eval(cfg: &ExperimentConfig, ckpt: &Path, data: &Path) -> Result<EvalReport> {
    if !ckpt.exists() {
        return Err(OvtError::Config(format!("checkpoint {} not found", ckpt.display())));
    }
    let (state, _) = checkpoint::load(ckpt)?;
    let views = read_split(data, MULTIVIEW_FILE)?;
    let holdout = read_optional(data, HOLDOUT_FILE)?;
    evaluate_model(&state, &views, holdout.as_ref(), &cfg.eval)
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, corrupt: bool) -> Result<GradCheckSummary> {
    run_gradcheck(&cfg.gradcheck, corrupt)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub mode: SamplingMode,
    pub initial_invariance: f64,
    pub final_invariance: f64,
    pub initial_zero_shot_top1: f64,
    pub final_zero_shot_top1: f64,
    pub final_itc_loss: f64,
    pub final_vc_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeMedian {
    pub mode: SamplingMode,
    pub final_invariance: f64,
    pub final_zero_shot_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub medians: Vec<ModeMedian>,
}

pub const COMPARE_HEADER: &str =
    "seed,mode,initial_invariance,final_invariance,initial_zero_shot_top1,final_zero_shot_top1,final_itc_loss,final_vc_loss";

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl CompareReport {
    pub fn median_for(&self, mode: SamplingMode) -> Option<&ModeMedian> {
        self.medians.iter().find(|m| m.mode == mode)
    }

    /// Per-seed rows followed by one `median` row per mode.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(COMPARE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.seed,
                r.mode.name(),
                r.initial_invariance,
                r.final_invariance,
                r.initial_zero_shot_top1,
                r.final_zero_shot_top1,
                r.final_itc_loss,
                r.final_vc_loss
            );
        }
        for m in &self.medians {
            let _ = writeln!(
                s,
                "median,{},,{},,{},,",
                m.mode.name(),
                m.final_invariance,
                m.final_zero_shot_top1
            );
        }
        s
    }
}

/// Runs every sampling mode on every seed with the same budget, in memory.
pub fn compare_runs(cfg: &ExperimentConfig, seeds: &[u64], threads: usize) -> Result<CompareReport> {
    if seeds.is_empty() {
        return Err(OvtError::Empty("seed list"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let gen = ovt_core::synthdata::GenSpec {
            seed,
            ..cfg.gen.clone()
        };
        let splits = generate_splits(&gen)?;
        for mode in SamplingMode::ALL {
            let train = TrainConfig {
                seed,
                sampling_mode: mode,
                threads,
                ..cfg.train.clone()
            };
            let (_, log) = train_on(cfg, &train, &splits)?;
            let (first, last) = (
                log.first().ok_or(OvtError::Empty("training log"))?,
                log.last().ok_or(OvtError::Empty("training log"))?,
            );
            rows.push(CompareRow {
                seed,
                mode,
                initial_invariance: first.mean_intra_object_distance,
                final_invariance: last.mean_intra_object_distance,
                initial_zero_shot_top1: first.zero_shot_top1,
                final_zero_shot_top1: last.zero_shot_top1,
                final_itc_loss: last.itc_loss,
                final_vc_loss: last.vc_loss,
            });
        }
    }
    let medians = SamplingMode::ALL
        .into_iter()
        .map(|mode| {
            let of =
                |f: fn(&CompareRow) -> f64| median(&rows.iter().filter(|r| r.mode == mode).map(f).collect::<Vec<_>>());
            ModeMedian {
                mode,
                final_invariance: of(|r| r.final_invariance),
                final_zero_shot_top1: of(|r| r.final_zero_shot_top1),
            }
        })
        .collect();
    Ok(CompareReport { rows, medians })
}

pub fn cmd_compare(cfg: &ExperimentConfig, seeds: &[u64], out: &Path, threads: usize) -> Result<CompareReport> {
    let report = compare_runs(cfg, seeds, threads)?;
    create_dir(out)?;
    fs::write(out.join(COMPARE_FILE), report.to_csv())?;
    Ok(report)
}

/// Parses `0,1,2` or a range `0..5`.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let bad = || OvtError::Config(format!("cannot parse seed list {raw:?}"));
    if let Some((a, b)) = raw.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    raw.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}
