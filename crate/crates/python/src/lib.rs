//! Python module `ekg`: run pipelines, inspect checkpoints and memory
//! banks, and call the teacher-selection and curvature routines.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ekg::harness::{self, load_run_config, Phase, Pipeline, RunConfig};
use ekg::landscape::{extremal_eigenvalues, EigenConfig, Quadratic};
use ekg::membank;
use ekg::netcore::load_checkpoint;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: ekg::Error) -> PyErr {
    match e {
        ekg::Error::Config(_) | ekg::Error::ShapeMismatch(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn phase(name: &str) -> PyResult<Phase> {
    Phase::ALL.into_iter().find(|p| p.name() == name).ok_or_else(|| PyValueError::new_err(format!("unknown phase `{name}`")))
}

/// Run phases of the configuration at `config` up to `through` and return the manifest.
#[pyfunction]
#[pyo3(signature = (config, run_dir=None, through="landscape"))]
fn run<'py>(py: Python<'py>, config: PathBuf, run_dir: Option<PathBuf>, through: &str) -> PyResult<Bound<'py, PyAny>> {
    let target = phase(through)?;
    let mut cfg = RunConfig::load(&config).map_err(err)?;
    if let Some(d) = run_dir {
        cfg.run_dir = d;
    }
    let manifest = py
        .detach(|| {
            let mut p = Pipeline::open(cfg)?;
            p.run(target)?;
            Ok(p.manifest().clone())
        })
        .map_err(err)?;
    json(py, &serde_json::to_string(&manifest).expect("manifest serializes"))
}

/// Effective configuration of a run directory as a dict.
#[pyfunction]
fn run_config<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_run_config(&run_dir).map_err(err)?;
    json(py, &serde_json::to_string(&cfg).expect("config serializes"))
}

/// FLOPs, parameter count and alive filters per layer of a checkpoint.
#[pyfunction]
fn checkpoint_stats<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let net = load_checkpoint(&path).map_err(err)?;
    let v = serde_json::json!({ "flops": net.flops(), "params": net.param_count(), "alive": net.alive_counts() });
    json(py, &v.to_string())
}

/// Report CSV over run directories; plots go to `out`.
#[pyfunction]
fn report(runs: Vec<PathBuf>, out: PathBuf) -> PyResult<String> {
    Ok(harness::report(&runs, &out).map_err(err)?.to_csv())
}

#[pyfunction]
fn teacher_target(l_star: f64, l_0: f64, k: usize, big_k: usize) -> f64 {
    membank::teacher_target(l_star, l_0, k, big_k)
}

/// Interim iteration chosen for each teacher `k = 1..=K`.
#[pyfunction]
fn select_teachers(interim_losses: BTreeMap<usize, f64>, l_star: f64, l_0: f64, big_k: usize) -> PyResult<Vec<usize>> {
    membank::select_teachers(&interim_losses, l_star, l_0, big_k).map_err(err)
}

/// `(lambda_max, lambda_min, cn)` of the quadratic with symmetric Hessian `hessian`.
#[pyfunction]
#[pyo3(signature = (hessian, tol=1e-3, max_iter=100, seed=0))]
fn quadratic_extremes(hessian: Vec<Vec<f64>>, tol: f64, max_iter: usize, seed: u64) -> PyResult<(f64, f64, f64)> {
    let n = hessian.len();
    if hessian.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("hessian must be square"));
    }
    let q = Quadratic::new(n, hessian.concat());
    let cfg = EigenConfig { tol, max_iter, seed, ..EigenConfig::default() };
    let e = extremal_eigenvalues(&q, &vec![0.0; n], &cfg).map_err(err)?;
    Ok((e.lambda_max, e.lambda_min, e.condition_number()))
}

/// Memory bank opened read-only from disk.
#[pyclass(name = "MemoryBank", frozen)]
struct PyMemoryBank(membank::MemoryBank);

#[pymethods]
impl PyMemoryBank {
    #[new]
    fn open(dir: PathBuf) -> PyResult<Self> {
        Ok(PyMemoryBank(membank::MemoryBank::open(&dir).map_err(err)?))
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes()
    }

    #[getter]
    fn ids(&self) -> Vec<usize> {
        self.0.ids().to_vec()
    }

    /// `(iteration, teacher_loss)` per teacher.
    fn teachers(&self) -> Vec<(usize, f64)> {
        self.0.entries().iter().map(|e| (e.iteration, e.teacher_loss)).collect()
    }

    /// Teachers whose loss does not exceed `current_loss`.
    fn qualifying(&self, current_loss: f64) -> Vec<usize> {
        self.0.qualifying(current_loss)
    }

    /// Row-major mean stored logits of the qualifying teachers for `ids`, and
    /// how many teachers qualified.
    fn ensemble_targets(&self, current_loss: f64, ids: Vec<usize>) -> PyResult<(Vec<f64>, usize)> {
        self.0.ensemble_targets(current_loss, &ids).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.ids().len()
    }
}

#[pymodule]
#[pyo3(name = "ekg")]
fn ekg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_stats, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(teacher_target, m)?)?;
    m.add_function(wrap_pyfunction!(select_teachers, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_extremes, m)?)?;
    m.add_class::<PyMemoryBank>()?;
    Ok(())
}
