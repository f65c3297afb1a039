//! Python bindings: channel model, reference equalizers, training and
//! evaluation of the in-context equalizer.

use std::collections::HashMap;

use mimo_icl::channel::{self, Constellation, ContextSet, Pilot, Quantizer, TaskDistributionSpec};
use mimo_icl::estimators;
use mimo_icl::experiments::{self, EvalProtocol, Equalizer, NamedEqualizer};
use mimo_icl::numerics::{CMatrix, Complex, RngStream};
use mimo_icl::training::{self, RunOptions, TrainConfig};
use mimo_icl::transformer::{self, ModelParams};
use pyo3::exceptions::{PyValueError, PyRuntimeError};
use pyo3::prelude::*;

fn err(e: mimo_icl::Error) -> PyErr {
    match e {
        mimo_icl::Error::Io(_) | mimo_icl::Error::NonFinite { .. } | mimo_icl::Error::Diverged { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<Complex>>) -> PyResult<CMatrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged channel matrix"));
    }
    CMatrix::from_vec(r, c, rows.into_iter().flatten().collect()).map_err(err)
}

fn context(constellation: &Constellation, pairs: Vec<(Vec<Complex>, Vec<Complex>)>) -> PyResult<ContextSet> {
    let pairs = pairs
        .into_iter()
        .map(|(x, y)| {
            let x_index = constellation
                .index_of(&x)
                .ok_or_else(|| PyValueError::new_err("pilot input is not a constellation point"))?;
            Ok(Pilot { x_index, x, y })
        })
        .collect::<PyResult<_>>()?;
    Ok(ContextSet { pairs })
}

/// A fading task: channel matrix `h` (rows = receive antennas) and noise variance.
#[pyclass(name = "Task", from_py_object)]
#[derive(Clone)]
struct PyTask {
    inner: channel::Task,
}

#[pymethods]
impl PyTask {
    #[new]
    fn new(h: Vec<Vec<Complex>>, sigma2: f64) -> PyResult<Self> {
        Ok(Self {
            inner: channel::Task::new(matrix(h)?, sigma2).map_err(err)?,
        })
    }

    /// Draws a task with i.i.d. CN(0, 1) entries and log-uniform noise variance.
    #[staticmethod]
    #[pyo3(signature = (seed, n_t=2, n_r=2, sigma2_db_min=-10.0, sigma2_db_max=-10.0))]
    fn sample(seed: u64, n_t: usize, n_r: usize, sigma2_db_min: f64, sigma2_db_max: f64) -> PyResult<Self> {
        let spec = TaskDistributionSpec::new(n_t, n_r, sigma2_db_min, sigma2_db_max).map_err(err)?;
        let mut rng = RngStream::new(seed, 0);
        Ok(Self {
            inner: channel::sample_task(&spec, &mut rng),
        })
    }

    #[getter]
    fn h(&self) -> Vec<Vec<Complex>> {
        (0..self.inner.h.rows()).map(|r| self.inner.h.row(r).to_vec()).collect()
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2
    }

    /// `(x, y)` pilot pairs with uniform 4-QAM inputs.
    #[pyo3(signature = (n, bits=None, seed=0))]
    fn sample_context(&self, n: usize, bits: Option<u32>, seed: u64) -> Vec<(Vec<Complex>, Vec<Complex>)> {
        let cons = Constellation::qam4(self.inner.n_t());
        let mut rng = RngStream::new(seed, 0);
        channel::sample_context(&self.inner, &Quantizer::from_bits(bits), &cons, n, &mut rng)
            .pairs
            .into_iter()
            .map(|p| (p.x, p.y))
            .collect()
    }

    /// Received vector for input `x`.
    #[pyo3(signature = (x, bits=None, seed=0))]
    fn transmit(&self, x: Vec<Complex>, bits: Option<u32>, seed: u64) -> PyResult<Vec<Complex>> {
        if x.len() != self.inner.n_t() {
            return Err(PyValueError::new_err("input length differs from n_t"));
        }
        let mut rng = RngStream::new(seed, 0);
        Ok(channel::apply_channel(&self.inner, &Quantizer::from_bits(bits), &x, &mut rng))
    }

    #[pyo3(signature = (x, y, bits=None))]
    fn log_likelihood(&self, x: Vec<Complex>, y: Vec<Complex>, bits: Option<u32>) -> PyResult<f64> {
        channel::log_likelihood(&self.inner, &Quantizer::from_bits(bits), &x, &y).map_err(err)
    }

    /// Posterior-mean estimate of `x` given `y` with the task known.
    #[pyo3(signature = (y, bits=None))]
    fn mmse(&self, y: Vec<Complex>, bits: Option<u32>) -> PyResult<Vec<Complex>> {
        let cons = Constellation::qam4(self.inner.n_t());
        estimators::mmse_known_task(&self.inner, &Quantizer::from_bits(bits), &cons, &y).map_err(err)
    }

    fn lmmse(&self, y: Vec<Complex>) -> PyResult<Vec<Complex>> {
        estimators::lmmse_known_task(&self.inner, &y, self.inner.n_t()).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Task(n_r={}, n_t={}, sigma2={})", self.inner.n_r(), self.inner.n_t(), self.inner.sigma2)
    }
}

/// Joint 4-QAM inputs in lexicographic order.
#[pyfunction]
#[pyo3(signature = (n_t=2))]
fn constellation(n_t: usize) -> Vec<Vec<Complex>> {
    Constellation::qam4(n_t).joint_inputs().to_vec()
}

/// Posterior mean under the continuous Gaussian channel prior, in closed form.
#[pyfunction]
#[pyo3(signature = (sigma2, context_pairs, y, bits=None))]
fn bayes_true_exact(
    sigma2: f64,
    context_pairs: Vec<(Vec<Complex>, Vec<Complex>)>,
    y: Vec<Complex>,
    bits: Option<u32>,
) -> PyResult<Vec<Complex>> {
    let n_t = context_pairs.first().map_or(2, |p| p.0.len());
    let cons = Constellation::qam4(n_t);
    let ctx = context(&cons, context_pairs)?;
    estimators::bayes_mmse_gaussian_exact(sigma2, &Quantizer::from_bits(bits), &cons, &ctx, &y).map_err(err)
}

/// Training hyperparameters. Keyword arguments are the same keys as the
/// text config format.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<HashMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut inner = TrainConfig::default();
        for (k, v) in kwargs.unwrap_or_default() {
            let text = if v.is_none() { "inf".to_string() } else { v.str()?.to_string() };
            inner.set(&k, &text).map_err(err)?;
        }
        inner.finalize().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_dict(&self) -> HashMap<String, String> {
        self.inner.to_pairs().into_iter().collect()
    }

    fn __repr__(&self) -> String {
        let body: Vec<String> = self.inner.to_pairs().iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("TrainConfig({})", body.join(", "))
    }
}

/// Trained transformer equalizer.
#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams,
    config: TrainConfig,
}

impl PyModel {
    fn constellation(&self) -> Constellation {
        Constellation::qam4(self.config.model.n_t)
    }
}

#[pymethods]
impl PyModel {
    /// Pre-trains a model. Returns `(model, losses)` with one loss per step.
    #[staticmethod]
    #[pyo3(signature = (config, threads=1, deterministic=true))]
    fn pretrain(py: Python<'_>, config: PyTrainConfig, threads: usize, deterministic: bool) -> PyResult<(Self, Vec<f64>)> {
        let cfg = config.inner;
        let opts = RunOptions { threads, deterministic };
        let out = py.detach(|| training::pretrain(&cfg, &opts)).map_err(err)?;
        let losses = out.curve.iter().map(|&(_, l)| l).collect();
        Ok((Self { params: out.params, config: cfg }, losses))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (params, config) = training::load_checkpoint(path).map_err(err)?;
        Ok(Self { params, config })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        training::save_checkpoint(&self.params, &self.config, path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.config.clone(),
        }
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    /// Soft estimate of the input behind `y` given the pilot pairs.
    fn predict(&self, context_pairs: Vec<(Vec<Complex>, Vec<Complex>)>, y: Vec<Complex>) -> PyResult<Vec<Complex>> {
        let cons = self.constellation();
        let ctx = context(&cons, context_pairs)?;
        let out = transformer::forward(&self.params, &self.config.model, &cons, &ctx, &y).map_err(err)?;
        Ok(out.final_estimate().to_vec())
    }

    /// Class probabilities at every query position of the prompt.
    fn class_probs(&self, context_pairs: Vec<(Vec<Complex>, Vec<Complex>)>, y: Vec<Complex>) -> PyResult<Vec<Vec<f64>>> {
        let cons = self.constellation();
        let ctx = context(&cons, context_pairs)?;
        let out = transformer::forward(&self.params, &self.config.model, &cons, &ctx, &y).map_err(err)?;
        Ok(out.class_probs)
    }

    /// Monte Carlo MSE of the model and the known-task references on fresh
    /// tasks. Returns `{estimator: (mse, ci_low, ci_high)}`.
    #[pyo3(signature = (n_tasks=100, n_symbols=16, n_context=None, bits=None, sigma2=None, seed=0, threads=1))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        py: Python<'_>,
        n_tasks: usize,
        n_symbols: usize,
        n_context: Option<usize>,
        bits: Option<u32>,
        sigma2: Option<f64>,
        seed: u64,
        threads: usize,
    ) -> PyResult<HashMap<String, (f64, f64, f64)>> {
        let m = &self.config.model;
        let task_spec = match sigma2 {
            Some(s) => TaskDistributionSpec::fixed(m.n_t, m.n_r, s),
            None => self.config.task_spec,
        };
        let protocol = EvalProtocol {
            n_test_tasks: n_tasks,
            n_context: n_context.unwrap_or(self.config.n_context),
            n_test_symbols_per_task: n_symbols,
            bits,
            task_spec,
            seed,
        };
        let eqs = [
            NamedEqualizer::new(
                "icl",
                Equalizer::Model {
                    params: &self.params,
                    config: m,
                },
            ),
            NamedEqualizer::new("mmse", Equalizer::MmseKnownTask),
            NamedEqualizer::new("lmmse", Equalizer::LmmseKnownTask),
        ];
        let opts = RunOptions {
            threads,
            deterministic: threads <= 1,
        };
        let run = py.detach(|| experiments::evaluate(&eqs, &protocol, &opts)).map_err(err)?;
        Ok(run
            .results
            .into_iter()
            .map(|r| (r.estimator, (r.mse, r.ci_low, r.ci_high)))
            .collect())
    }
}

#[pymodule]
pub fn mimo_icl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTask>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(constellation, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_true_exact, m)?)?;
    Ok(())
}
