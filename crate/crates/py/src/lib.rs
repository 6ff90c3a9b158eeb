//! Python bindings for `pco-core`.
//!
//! Matrices cross the boundary as lists of rows. Validation errors surface as
//! `ValueError`, numeric failures (non-finite values, degenerate norms) as
//! `ArithmeticError`.

use pco_core::engine::{self, Phase, RunConfig, SchedulerConfig, StageState, Trainer};
use pco_core::eval;
use pco_core::losses::{self, ClassifierBank, CosineLogits, MarginSpec};
use pco_core::tensor::{Graph, Tensor};
use pco_core::{ncs, prototypes, rng, synth, Error};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty matrix"));
    }
    Tensor::from_rows(rows).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = t.dims2();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// Mean unified margin loss over cosine rows and its gradient with respect
/// to the cosines.
#[pyfunction]
#[pyo3(signature = (cosines, labels, s, m1=1.0, m2=0.0, m3=0.0))]
fn margin_loss(
    cosines: Vec<Vec<f64>>,
    labels: Vec<usize>,
    s: f64,
    m1: f64,
    m2: f64,
    m3: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let spec = MarginSpec::new(s, m1, m2, m3).map_err(py_err)?;
    let mut g = Graph::new();
    let values = g.param(matrix(&cosines)?);
    let logits = CosineLogits {
        values,
        label_column: labels,
    };
    let loss = losses::unified_margin_loss(&mut g, &logits, spec).map_err(py_err)?;
    let value = g.value(loss).item();
    g.backward(loss).map_err(py_err)?;
    let grad = g.grad(values).map(to_rows).unwrap_or_default();
    Ok((value, grad))
}

/// Per-sample unified margin losses, no gradient.
#[pyfunction]
#[pyo3(signature = (cosines, labels, s, m1=1.0, m2=0.0, m3=0.0))]
fn margin_losses(cosines: Vec<Vec<f64>>, labels: Vec<usize>, s: f64, m1: f64, m2: f64, m3: f64) -> PyResult<Vec<f64>> {
    let spec = MarginSpec::new(s, m1, m2, m3).map_err(py_err)?;
    losses::per_sample_margin_losses(&matrix(&cosines)?, &labels, spec).map_err(py_err)
}

/// Sorted class ids for one step: every positive plus uniform negatives.
#[pyfunction]
fn ncs_sample(classes: usize, ratio: f64, batch_labels: Vec<usize>, seed: u64) -> PyResult<Vec<usize>> {
    let mut r = rng::seeded(seed);
    let set = ncs::sample(classes, ratio, &batch_labels, &mut r).map_err(py_err)?;
    Ok(set.global_ids().to_vec())
}

#[pyfunction]
fn sampled_count(classes: usize, ratio: f64) -> usize {
    ncs::sampled_count(classes, ratio)
}

#[pyclass(name = "PrototypeBank")]
struct PyPrototypeBank {
    inner: prototypes::PrototypeBank,
}

#[pymethods]
impl PyPrototypeBank {
    #[new]
    fn new(dim: usize, classes: usize) -> Self {
        PyPrototypeBank {
            inner: prototypes::PrototypeBank::new(dim, classes),
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn is_initialized(&self, class: usize) -> bool {
        self.inner.is_initialized(class)
    }

    fn update(&mut self, class: usize, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.update(class, &x).map(<[f64]>::to_vec).map_err(py_err)
    }

    fn batch_update(&mut self, labels: Vec<usize>, features: Vec<Vec<f64>>) -> PyResult<()> {
        self.inner.batch_update(&labels, &matrix(&features)?).map_err(py_err)
    }

    fn prototype(&self, class: usize) -> PyResult<Vec<f64>> {
        self.inner.prototype(class).map(<[f64]>::to_vec).map_err(py_err)
    }
}

/// Folds one score into the scheduler state. Returns
/// `(phase, css_smoothed, iteration)`.
#[pyfunction]
#[pyo3(signature = (phase, css_smoothed, iteration, observed, score, delta1, delta2, smoothing=0.9))]
#[allow(clippy::too_many_arguments)]
fn step_scheduler(
    phase: &str,
    css_smoothed: f64,
    iteration: u64,
    observed: bool,
    score: f64,
    delta1: f64,
    delta2: f64,
    smoothing: f64,
) -> PyResult<(String, f64, u64)> {
    let phase: Phase = phase.parse().map_err(py_err)?;
    let state = StageState {
        phase,
        css_raw: css_smoothed,
        css_smoothed,
        iteration,
        observed,
    };
    let cfg = SchedulerConfig {
        delta1,
        delta2,
        smoothing,
    };
    let next = engine::step_scheduler(&state, score, &cfg);
    Ok((next.phase.name().to_string(), next.css_smoothed, next.iteration))
}

/// Mean squared cosine between features and their class columns of a `d×C`
/// weight matrix (columns are normalized first).
#[pyfunction]
fn css_score(features: Vec<Vec<f64>>, weights: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let bank = ClassifierBank::from_weights(matrix(&weights)?).map_err(py_err)?;
    engine::css_score(&matrix(&features)?, &bank, &labels).map_err(py_err)
}

#[pyfunction]
fn tar_at_far(scores: Vec<f64>, is_match: Vec<bool>, far: f64) -> PyResult<f64> {
    eval::tar_at_far(&scores, &is_match, far).map_err(py_err)
}

/// `(intra, inter)` mean cosines of labelled features.
#[pyfunction]
fn cluster_stats(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, f64)> {
    eval::cluster_stats(&matrix(&features)?, &labels).map_err(py_err)
}

#[pyfunction]
fn sample_vmf(mean: Vec<f64>, kappa: f64, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let mut r = rng::seeded(seed);
    synth::sample_vmf(&mean, kappa, n, &mut r).map_err(py_err)
}

/// Runs the gradient-check suite; yields `(module, case, worst, tolerance)`.
#[pyfunction]
#[pyo3(signature = (module=None, seeds=10))]
fn grad_check(py: Python<'_>, module: Option<String>, seeds: u64) -> PyResult<Vec<(String, String, f64, f64)>> {
    let out = py
        .detach(|| pco_core::gradsuite::run_grad_checks(module.as_deref(), seeds))
        .map_err(py_err)?;
    Ok(out
        .into_iter()
        .map(|o| (o.module.to_string(), o.name.to_string(), o.worst, o.tolerance))
        .collect())
}

#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    /// Builds a trainer from config text in the CLI's `key = value` format.
    #[new]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = RunConfig::parse(config).map_err(py_err)?;
        let inner = Trainer::from_run_config(cfg).map_err(py_err)?;
        Ok(PyTrainer { inner })
    }

    /// One step; returns `(iteration, phase, loss, css_smoothed, lr)`.
    fn step(&mut self) -> PyResult<(u64, String, f64, f64, f64)> {
        let row = self.inner.step().map_err(py_err)?;
        Ok((
            row.iteration,
            row.phase.name().to_string(),
            row.loss,
            row.css_smoothed,
            row.lr,
        ))
    }

    /// Steps until the iteration budget is spent; returns the last phase.
    fn run(&mut self, py: Python<'_>) -> PyResult<String> {
        let inner = &mut self.inner;
        py.detach(|| inner.run(|_, _| Ok(()))).map_err(py_err)?;
        Ok(self.inner.stage().phase.name().to_string())
    }

    #[getter]
    fn phase(&self) -> String {
        self.inner.stage().phase.name().to_string()
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.stage().iteration
    }

    fn is_done(&self) -> bool {
        self.inner.is_done()
    }

    fn save_checkpoint(&self, path: &str) -> PyResult<()> {
        self.inner.checkpoint().save(std::path::Path::new(path)).map_err(py_err)
    }
}

#[pymodule]
fn pco(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(margin_losses, m)?)?;
    m.add_function(wrap_pyfunction!(ncs_sample, m)?)?;
    m.add_function(wrap_pyfunction!(sampled_count, m)?)?;
    m.add_function(wrap_pyfunction!(step_scheduler, m)?)?;
    m.add_function(wrap_pyfunction!(css_score, m)?)?;
    m.add_function(wrap_pyfunction!(tar_at_far, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_stats, m)?)?;
    m.add_function(wrap_pyfunction!(sample_vmf, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_class::<PyPrototypeBank>()?;
    m.add_class::<PyTrainer>()?;
    Ok(())
}
