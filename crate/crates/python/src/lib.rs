//! Python bindings: `import ovt`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ovt_cli::{cmd_gen, cmd_train};
use ovt_core::config::ExperimentConfig;
use ovt_core::eval::{accuracy_at as core_accuracy_at, adaptive_threshold as core_adaptive_threshold};
use ovt_core::gradcheck::run_gradcheck;
use ovt_core::losses::{
    itc_loss as core_itc_loss, total_loss as core_total_loss, vc_pair_loss as core_vc_pair_loss, ItcBatch, MarginMode,
};
use ovt_core::model::checkpoint;
use ovt_core::model::pretrain::build_model;
use ovt_core::model::ModelState;
use ovt_core::synthdata::generate_splits;
use ovt_core::viewpoints::{
    anchor_embedding as core_anchor, select_outliers as core_select_outliers, ObjectEmbeddings,
};
use ovt_core::{Matrix, OvtError};

fn err(e: OvtError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn config(json: Option<&str>, overrides: Vec<String>, seed: Option<u64>) -> PyResult<ExperimentConfig> {
    let base = match json {
        Some(j) => ExperimentConfig::from_json(j).map_err(err)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&overrides).map_err(err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.finalize().map_err(err)
}

fn margin_mode(name: &str) -> PyResult<MarginMode> {
    match name {
        "additive" => Ok(MarginMode::Additive),
        "hinge" => Ok(MarginMode::Hinge),
        other => Err(PyValueError::new_err(format!("unknown margin mode {other:?}"))),
    }
}

/// Dual-stream model with adapters and the fusion block.
#[pyclass(module = "ovt", frozen)]
struct Model {
    state: ModelState,
    seed: u64,
}

#[pymethods]
impl Model {
    /// Builds the pretrained base and fresh trainable parameters from a JSON config.
    #[staticmethod]
    #[pyo3(signature = (config_json=None, overrides=Vec::new(), seed=None))]
    fn build(config_json: Option<&str>, overrides: Vec<String>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config(config_json, overrides, seed)?;
        let splits = generate_splits(&cfg.gen).map_err(err)?;
        let t = &cfg.train;
        let state = build_model(
            &cfg.model,
            cfg.gen.input_dim,
            t.lora_rank,
            t.alpha,
            t.train_temperature,
            &splits.clean,
            cfg.seed,
        )
        .map_err(err)?;
        Ok(Self { state, seed: cfg.seed })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (state, header) = checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            state,
            seed: header.seed,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.state, self.seed, &path).map_err(err)
    }

    fn encode_image(&self, raw: Vec<f64>) -> PyResult<Vec<f64>> {
        self.state.encode_image(&raw).map_err(err)
    }

    fn base_image_embedding(&self, raw: Vec<f64>) -> PyResult<Vec<f64>> {
        self.state.base_image_embedding(&raw).map_err(err)
    }

    fn encode_text(&self, caption: &str) -> PyResult<Vec<f64>> {
        self.state.encode_text(caption).map_err(err)
    }

    /// `(total, trainable)` parameter counts.
    fn param_counts(&self) -> (usize, usize) {
        self.state.param_counts()
    }

    fn frozen_checksum(&self) -> String {
        self.state.frozen_checksum()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.state.tau()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.state.alpha
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.state.embed_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.state.input_dim()
    }

    fn __repr__(&self) -> String {
        let (total, trainable) = self.state.param_counts();
        format!(
            "Model(input_dim={}, embed_dim={}, params={total}, trainable={trainable})",
            self.state.input_dim(),
            self.state.embed_dim()
        )
    }
}

type ItcResult = (f64, Vec<Vec<f64>>, Vec<Vec<f64>>, f64);

/// Symmetric contrastive loss: `(loss, grad_image, grad_text, grad_log_tau)`.
#[pyfunction]
fn itc_loss(image: Vec<Vec<f64>>, text: Vec<Vec<f64>>, tau: f64) -> PyResult<ItcResult> {
    let out = core_itc_loss(&ItcBatch {
        image: matrix(&image)?,
        text: matrix(&text)?,
        tau,
    })
    .map_err(err)?;
    Ok((out.loss, rows(&out.grad_image), rows(&out.grad_text), out.grad_log_tau))
}

#[pyfunction]
#[pyo3(signature = (z, anchor, margin=0.0, mode="additive"))]
fn vc_pair_loss(z: Vec<f64>, anchor: Vec<f64>, margin: f64, mode: &str) -> PyResult<f64> {
    core_vc_pair_loss(&z, &anchor, margin, margin_mode(mode)?).map_err(err)
}

#[pyfunction]
fn total_loss(itc: f64, vc: f64, lam: f64) -> PyResult<f64> {
    core_total_loss(itc, vc, lam).map_err(err)
}

/// Anchor of one object's view embeddings: `(anchor, weights)`.
#[pyfunction]
fn anchor_embedding(embeddings: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let n = embeddings.len();
    let obj = ObjectEmbeddings::new(0, matrix(&embeddings)?, (0..n).collect()).map_err(err)?;
    let a = core_anchor(&obj).map_err(err)?;
    Ok((a.anchor, a.weights))
}

/// Top-`k` views farthest from `anchor`: list of `(index, distance)`.
#[pyfunction]
fn select_outliers(embeddings: Vec<Vec<f64>>, anchor: Vec<f64>, k: usize) -> PyResult<Vec<(usize, f64)>> {
    let n = embeddings.len();
    let obj = ObjectEmbeddings::new(0, matrix(&embeddings)?, (0..n).collect()).map_err(err)?;
    core_select_outliers(&obj, &anchor, k).map_err(err)
}

#[pyfunction]
fn accuracy_at(similarities: Vec<f64>, beta: f64) -> PyResult<f64> {
    core_accuracy_at(&similarities, beta).map_err(err)
}

#[pyfunction]
fn adaptive_threshold(similarities: Vec<f64>) -> PyResult<f64> {
    core_adaptive_threshold(&similarities).map_err(err)
}

/// Writes the three JSONL splits to `out_dir`; returns record counts.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None, overrides=Vec::new(), seed=None))]
fn generate(
    out_dir: PathBuf,
    config_json: Option<&str>,
    overrides: Vec<String>,
    seed: Option<u64>,
) -> PyResult<(usize, usize, usize)> {
    let cfg = config(config_json, overrides, seed)?;
    let s = cmd_gen(&cfg, &out_dir).map_err(err)?;
    Ok((s.multiview, s.clean, s.holdout))
}

/// Trains on the splits in `data_dir`; returns the run summary as JSON.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, config_json=None, overrides=Vec::new(), seed=None, threads=1))]
fn train(
    data_dir: PathBuf,
    out_dir: PathBuf,
    config_json: Option<&str>,
    overrides: Vec<String>,
    seed: Option<u64>,
    threads: usize,
) -> PyResult<String> {
    let cfg = config(config_json, overrides, seed)?;
    let s = cmd_train(&cfg, &data_dir, &out_dir, threads.max(1)).map_err(err)?;
    serde_json::to_string(&s).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Gradient checks: `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (config_json=None, overrides=Vec::new()))]
fn gradcheck(config_json: Option<&str>, overrides: Vec<String>) -> PyResult<(bool, String)> {
    let cfg = config(config_json, overrides, None)?;
    let s = run_gradcheck(&cfg.gradcheck, false).map_err(err)?;
    Ok((s.passed(), s.table()))
}

#[pymodule]
fn ovt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(itc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(vc_pair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(anchor_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(select_outliers, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_at, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
