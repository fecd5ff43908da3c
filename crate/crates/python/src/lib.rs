//! Python bindings: systems, training, rank tests, symbolic search and the
//! pipeline runner.

use std::sync::Arc;

use ndarray::Array2;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use conserva::nn::{ArchSpec, NeuralField};
use conserva::pipeline::{run_pipeline, RunConfig, Stage};
use conserva::rank::{self, ScalarFn};
use conserva::symbolic::{self, Binding, SearchConfig};
use conserva::train::{self, TrainConfig};
use conserva::{Error, SampleBatch};

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> PyResult<Array2<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("every point needs {cols} coordinates")));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "System", frozen)]
struct PySystem {
    inner: conserva::System,
}

#[pymethods]
impl PySystem {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        Ok(PySystem { inner: conserva::System::from_name(name).map_err(to_py)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.s()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().to_vec()
    }

    fn field(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.field(&z).map_err(to_py)
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.sample(n, seed).map_err(to_py)?.points))
    }

    /// |f̂·∇̂H| for a supplied gradient.
    fn residual(&self, z: Vec<f64>, grad: Vec<f64>) -> PyResult<f64> {
        self.inner.residual(&z, &grad).map_err(to_py)
    }

    /// (label, value, gradient) of every closed-form conserved quantity.
    fn conserved_quantities(&self, z: Vec<f64>) -> PyResult<Vec<(String, f64, Vec<f64>)>> {
        if z.len() != self.inner.s() {
            return Err(to_py(Error::Dimension { expected: self.inner.s(), got: z.len() }));
        }
        Ok(self.inner.analytic_cqs().iter().map(|c| {
            let (v, g) = c.eval(&z);
            (c.label.clone(), v, g)
        }).collect())
    }

    fn integrate(&self, z0: Vec<f64>, dt: f64, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.integrate(&z0, dt, steps).map_err(to_py)?.states)
    }
}

#[pyclass(name = "Ensemble", frozen)]
struct PyEnsemble {
    nets: Vec<NeuralField>,
    #[pyo3(get)]
    final_l1: f64,
    #[pyo3(get)]
    final_l2: f64,
    #[pyo3(get)]
    per_net: Vec<f64>,
}

#[pymethods]
impl PyEnsemble {
    fn __len__(&self) -> usize {
        self.nets.len()
    }

    /// Values of every net at one point.
    fn values(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.nets.iter().map(|n| n.forward(&z).map_err(to_py)).collect()
    }

    fn gradients(&self, z: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.nets.iter().map(|n| n.grad_input(&z).map_err(to_py)).collect()
    }

    #[pyo3(signature = (points, eps = rank::DEFAULT_EPS, seed = 0))]
    fn differential_rank(&self, points: Vec<Vec<f64>>, eps: f64, seed: u64) -> PyResult<usize> {
        let dim = self.nets.first().map_or(0, |n| n.input_dim);
        let a = matrix(&points, dim)?;
        let fs: Vec<&dyn ScalarFn> = self.nets.iter().map(|n| n as &dyn ScalarFn).collect();
        Ok(rank::differential_rank(&fs, a.view(), eps, seed).map_err(to_py)?.k_d)
    }
}

/// Train `n` plain networks on `points` sampled from `system`.
#[pyfunction]
#[pyo3(signature = (system, points, n, epochs = 100, lam = 0.02, seed = 0))]
fn train_ensemble(
    py: Python<'_>,
    system: &PySystem,
    points: Vec<Vec<f64>>,
    n: usize,
    epochs: usize,
    lam: f64,
    seed: u64,
) -> PyResult<PyEnsemble> {
    let sys = &system.inner;
    let batch = SampleBatch { system: sys.name(), seed, labels: sys.labels().to_vec(), points: matrix(&points, sys.s())? };
    let cfg = TrainConfig { epochs, lambda: lam, seed, ..Default::default() };
    let (nets, rep) = py
        .detach(|| train::train(sys, &batch, n, &ArchSpec::plain(), &cfg))
        .map_err(to_py)?;
    Ok(PyEnsemble { nets, final_l1: rep.final_train.l1, final_l2: rep.final_train.l2, per_net: rep.final_train.per_net })
}

/// Symbolic search; returns accepted (rpn, infix) pairs.
#[pyfunction]
#[pyo3(signature = (system, max_len = 9, target_count = None, budget = None, n_points = 1000, seed = 0))]
fn search(
    py: Python<'_>,
    system: &PySystem,
    max_len: usize,
    target_count: Option<usize>,
    budget: Option<u64>,
    n_points: usize,
    seed: u64,
) -> PyResult<Vec<(String, String)>> {
    let sys = &system.inner;
    let cfg = SearchConfig { max_len, target_count, budget, seed, ..Default::default() };
    let st = py
        .detach(|| -> conserva::Result<_> {
            let batch = sys.sample(n_points, seed)?;
            let binding = Arc::new(Binding::for_system(sys, cfg.pde_features)?);
            let g = cfg.grammar(&binding)?;
            symbolic::search(sys, &g, binding, batch.points.view(), &cfg)
        })
        .map_err(to_py)?;
    Ok(st.accepted.into_iter().map(|f| (f.rpn, f.infix)).collect())
}

/// Run pipeline stages from a JSON config; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, stages = None))]
fn run(py: Python<'_>, config_json: &str, stages: Option<Vec<String>>) -> PyResult<String> {
    let v: serde_json::Value = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let stages = match stages {
        None => Stage::PIPELINE.to_vec(),
        Some(names) => names
            .iter()
            .map(|s| {
                [Stage::Sample, Stage::Train, Stage::Rank, Stage::Sweep, Stage::Search, Stage::Report]
                    .into_iter()
                    .find(|st| st.name() == s)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown stage '{s}'")))
            })
            .collect::<PyResult<Vec<_>>>()?,
    };
    let man = py.detach(|| run_pipeline(&cfg, &stages)).map_err(to_py)?;
    serde_json::to_string(&man).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn conserva_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(train_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("SYSTEMS", conserva::systems::SYSTEM_NAMES.to_vec())?;
    Ok(())
}
