//! Python bindings: routing and conflict-analysis primitives, the task
//! suites, checkpoints, configuration presets and the on-disk pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use m3dt::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use m3dt::commands::{self, RunDir};
use m3dt::conflict::{self, AgreementVector, GradScope, GradientReport};
use m3dt::eval::EvalMode;
use m3dt::params::ParamSet;
use m3dt::pipeline::{ExperimentConfig, GroupingChoice, Variant};
use m3dt::tasks::{self, SuiteKind};
use m3dt::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Explicit JSON, else the run directory's `config.json`, else a preset.
fn config_from(out_dir: &Path, config_json: Option<&str>, preset: &str) -> PyResult<ExperimentConfig> {
    let saved = out_dir.join("config.json");
    match config_json {
        Some(text) => ExperimentConfig::from_json(text).map_err(py_err),
        None if saved.exists() => {
            let text = std::fs::read_to_string(&saved).map_err(|e| PyIOError::new_err(e.to_string()))?;
            ExperimentConfig::from_json(&text).map_err(py_err)
        }
        None => ExperimentConfig::preset(preset).map_err(py_err),
    }
}

fn report_of(per_task: BTreeMap<usize, Vec<f64>>) -> PyResult<GradientReport> {
    GradientReport::from_vectors(GradScope::AllBackbone, per_task).map_err(py_err)
}

/// Return-to-go for a reward sequence.
#[pyfunction]
fn compute_rtg(rewards: Vec<f32>) -> Vec<f32> {
    tasks::compute_rtg(&rewards)
}

/// Softmax over the `k` largest logits, zero elsewhere.
#[pyfunction]
fn topk_route(logits: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    m3dt::moe::topk_route(&logits, k).map_err(py_err)
}

/// Mean cosine of each task gradient to the mean gradient, or `None` when
/// undefined.
#[pyfunction]
fn gradient_similarity(per_task: BTreeMap<usize, Vec<f64>>) -> PyResult<Option<f64>> {
    Ok(conflict::gradient_similarity(&report_of(per_task)?).value)
}

#[pyfunction]
#[pyo3(signature = (per_task, l2_normalize=false))]
fn agreement_vectors(per_task: BTreeMap<usize, Vec<f64>>, l2_normalize: bool) -> PyResult<BTreeMap<usize, Vec<f64>>> {
    let report = report_of(per_task)?;
    Ok(conflict::agreement_vectors(&report, l2_normalize)
        .into_iter()
        .map(|v| (v.task_id, v.values))
        .collect())
}

#[pyfunction]
fn random_grouping(task_ids: Vec<usize>, n_groups: usize, seed: u64) -> PyResult<BTreeMap<usize, usize>> {
    Ok(conflict::random_grouping(&task_ids, n_groups, seed).map_err(py_err)?.assignment)
}

/// k-means over `{task_id: vector}`; returns `{task_id: group}`.
#[pyfunction]
#[pyo3(signature = (vectors, k, seed, max_iters=100))]
fn kmeans_grouping(
    vectors: BTreeMap<usize, Vec<f64>>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> PyResult<BTreeMap<usize, usize>> {
    let vs: Vec<AgreementVector> = vectors
        .into_iter()
        .map(|(task_id, values)| AgreementVector { task_id, values })
        .collect();
    Ok(conflict::kmeans_grouping(&vs, k, seed, max_iters).map_err(py_err)?.assignment.assignment)
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    conflict::adjusted_rand_index(&a, &b).map_err(py_err)
}

/// Task specs of a named suite as a JSON list.
#[pyfunction]
fn suite_tasks(kind: &str, episode_len: usize) -> PyResult<String> {
    let kind: SuiteKind = serde_json::from_value(serde_json::Value::String(kind.into())).map_err(json_err)?;
    serde_json::to_string(&kind.tasks(episode_len)).map_err(json_err)
}

/// Canonical form of an evaluation mode string such as `topk:2`.
#[pyfunction]
fn parse_eval_mode(mode: &str) -> PyResult<String> {
    Ok(mode.parse::<EvalMode>().map_err(py_err)?.to_string())
}

/// Preset configuration (`desk`, `full` or `smoke`) as JSON.
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::preset(name).map_err(py_err)?;
    serde_json::to_string_pretty(&cfg).map_err(json_err)
}

/// Run every stage into `out_dir`; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None, preset="smoke", seed=None))]
fn run_pipeline(out_dir: PathBuf, config_json: Option<&str>, preset: &str, seed: Option<u64>) -> PyResult<String> {
    let mut cfg = match config_json {
        Some(text) => ExperimentConfig::from_json(text).map_err(py_err)?,
        None => ExperimentConfig::preset(preset).map_err(py_err)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.output_dir = Some(out_dir.clone());
    let report = commands::run_pipeline(&cfg, &RunDir::new(out_dir)).map_err(py_err)?;
    serde_json::to_string(&report).map_err(json_err)
}

/// Run one ablation variant against an existing run directory (its saved
/// configuration is used unless `config_json` is given).
#[pyfunction]
#[pyo3(signature = (out_dir, variant, config_json=None, preset="smoke"))]
fn ablate(out_dir: PathBuf, variant: &str, config_json: Option<&str>, preset: &str) -> PyResult<String> {
    let mut cfg = config_from(&out_dir, config_json, preset)?;
    cfg.output_dir = Some(out_dir.clone());
    let v: Variant = variant.parse().map_err(py_err)?;
    let result = commands::ablate(&cfg, &RunDir::new(out_dir), v).map_err(py_err)?;
    serde_json::to_string(&result).map_err(json_err)
}

/// Group tasks of an existing run with `random` or `gradient`.
#[pyfunction]
#[pyo3(signature = (out_dir, method, config_json=None, preset="smoke"))]
fn group_tasks(out_dir: PathBuf, method: &str, config_json: Option<&str>, preset: &str) -> PyResult<Vec<Vec<usize>>> {
    let cfg = config_from(&out_dir, config_json, preset)?;
    let m: GroupingChoice = method.parse().map_err(py_err)?;
    Ok(commands::group_tasks(&cfg, &RunDir::new(out_dir), m).map_err(py_err)?.members)
}

/// Smoothed-conflict peak detector used for early stopping.
#[pyclass(name = "PeakDetector")]
struct PyPeakDetector(conflict::PeakDetector);

#[pymethods]
impl PyPeakDetector {
    #[new]
    #[pyo3(signature = (window, patience, min_samples=0))]
    fn new(window: usize, patience: usize, min_samples: usize) -> Self {
        Self(conflict::PeakDetector::new(window, patience, min_samples))
    }

    /// Add a conflict sample; returns the smoothed value.
    fn push(&mut self, step: u64, conflict: f64) -> f64 {
        self.0.push(step, conflict)
    }

    #[getter]
    fn fired(&self) -> Option<u64> {
        self.0.fired()
    }

    #[getter]
    fn best_step(&self) -> Option<u64> {
        self.0.best_step()
    }
}

/// Parameters and metadata of a checkpoint file.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    params: ParamSet,
    meta: CheckpointMeta,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, meta) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { params, meta })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.params, &self.meta, &path).map_err(py_err)
    }

    #[getter]
    fn stage(&self) -> u32 {
        self.meta.stage
    }

    #[getter]
    fn step(&self) -> u64 {
        self.meta.step
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.meta.config_hash.clone()
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.params.n_experts()
    }

    fn names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }

    /// `(shape, flat values)` of one tensor.
    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self.params.tensor(name).map_err(py_err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn component(&self, name: &str) -> PyResult<String> {
        let e = self
            .params
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown parameter `{name}`")))?;
        Ok(e.component.to_string())
    }

    fn meta_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.meta).map_err(json_err)
    }
}

#[pymodule]
fn m3dt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compute_rtg, m)?)?;
    m.add_function(wrap_pyfunction!(topk_route, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(agreement_vectors, m)?)?;
    m.add_function(wrap_pyfunction!(random_grouping, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_grouping, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(suite_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(parse_eval_mode, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(group_tasks, m)?)?;
    m.add_class::<PyPeakDetector>()?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}
