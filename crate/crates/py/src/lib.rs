//! Python bindings: quadrature, Buckley–Leverett analytics, random
//! conductivity fields, the reference flow solver, small networks and
//! experiment runs.

use std::collections::HashMap;
use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use weakform::buckley::{self, BLSolution};
use weakform::diffcore::Matrix;
use weakform::evalkit;
use weakform::experiment::{self, ExperimentConfig};
use weakform::network::{self, Activation, MlpParams};
use weakform::singlephase::{self, ConductivityField};
use weakform::{Error, quadrature};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Domain(_) | Error::Dimension(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
#[pyfunction]
fn gauss_legendre(n: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let rule = quadrature::gauss_legendre(n).map_err(to_py)?;
    Ok((rule.nodes, rule.weights))
}

#[pyfunction]
fn rel_l2(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    evalkit::rel_l2(&pred, &truth).map_err(to_py)
}

#[pyfunction]
fn r2(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    evalkit::r2(&pred, &truth).map_err(to_py)
}

/// Corey fractional flow with viscosity ratio `m`.
#[pyclass(frozen)]
struct FracFlow(buckley::FracFlow);

#[pymethods]
impl FracFlow {
    #[new]
    #[pyo3(signature = (m = 2.0, s_wr = 0.0, s_or = 0.0))]
    fn new(m: f64, s_wr: f64, s_or: f64) -> PyResult<Self> {
        Ok(Self(buckley::FracFlow::new(m, s_wr, s_or).map_err(to_py)?))
    }

    fn fw(&self, s: f64) -> PyResult<f64> {
        self.0.fw(s).map_err(to_py)
    }

    fn fw_prime(&self, s: f64) -> PyResult<f64> {
        self.0.fw_prime(s).map_err(to_py)
    }

    /// `(S*, shock speed)`.
    fn welge_shock(&self) -> PyResult<(f64, f64)> {
        buckley::welge_shock(&self.0).map_err(to_py)
    }

    /// Analytic saturation at `(tau, t)`, `t > 0`.
    fn saturation(&self, tau: f64, t: f64) -> PyResult<f64> {
        let sol = BLSolution::new(self.0).map_err(to_py)?;
        buckley::analytic_s(tau, t, &sol).map_err(to_py)
    }
}

/// Log-normal conductivity from a truncated KL expansion on the 1020 m square.
#[pyclass(frozen)]
struct KleField(ConductivityField);

#[pymethods]
impl KleField {
    #[new]
    #[pyo3(signature = (seed, correlation_fraction = 0.2, terms = 20))]
    fn new(seed: u64, correlation_fraction: f64, terms: usize) -> PyResult<Self> {
        let eta = correlation_fraction * singlephase::fd::LENGTH;
        let f = singlephase::kle_build(singlephase::fd::LENGTH, (eta, eta), terms, seed).map_err(to_py)?;
        Ok(Self(f))
    }

    /// Retained eigenvalues, largest first.
    fn eigenvalues(&self) -> Vec<f64> {
        self.0.modes.iter().map(|m| m.lambda).collect()
    }

    /// `(K, dK/dx, dK/dy)`.
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        self.0.eval(x, y)
    }

    /// Heads for steps 0..=50 of the reference run, each a row-major
    /// 51×51 list (`y` outer).
    fn solve_heads(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(singlephase::fd_solve(&self.0).map_err(to_py)?.heads)
    }
}

/// Fully connected network.
#[pyclass(frozen)]
struct Mlp(MlpParams);

#[pymethods]
impl Mlp {
    #[new]
    #[pyo3(signature = (layer_sizes, activation = "tanh", seed = 0))]
    fn new(layer_sizes: Vec<usize>, activation: &str, seed: u64) -> PyResult<Self> {
        let act: Activation = activation.parse().map_err(to_py)?;
        Ok(Self(network::init_mlp(&layer_sizes, act, seed).map_err(to_py)?))
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self(MlpParams::from_text(text).map_err(to_py)?))
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    /// Raw network outputs for rows of inputs.
    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let d = self.0.input_dim();
        if inputs.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err(format!("every input row needs {d} values")));
        }
        let flat: Vec<f64> = inputs.concat();
        let x = Matrix::from_shape_vec((inputs.len(), d), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(self.0.predict(&x).map_err(to_py)?.column(0).to_vec())
    }
}

/// Canonical `key=value` form of a config (defaults filled in).
#[pyfunction]
fn normalize_config(text: &str) -> PyResult<String> {
    Ok(ExperimentConfig::parse(text).map_err(to_py)?.to_text())
}

/// Trains one config, writes artifacts to `out_dir` and returns the metrics.
#[pyfunction]
#[pyo3(signature = (config, out_dir, threads = 1))]
fn run_experiment(config: &str, out_dir: &str, threads: usize) -> PyResult<HashMap<String, String>> {
    let cfg = ExperimentConfig::parse(config).map_err(to_py)?;
    let out = experiment::run(&cfg, Path::new(out_dir), threads, |_| {}).map_err(to_py)?;
    let r = out.report;
    Ok(HashMap::from([
        ("model".to_string(), r.model.to_string()),
        ("problem".to_string(), r.problem),
        ("data_points".to_string(), r.data_points.to_string()),
        ("l2".to_string(), format!("{:e}", r.l2)),
        ("r2".to_string(), r.r2.to_string()),
        ("lambda_f_final".to_string(), r.lambda_f_final.to_string()),
        ("fingerprint".to_string(), r.fingerprint),
    ]))
}

#[pymodule]
fn pyweakform(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gauss_legendre, m)?)?;
    m.add_function(wrap_pyfunction!(rel_l2, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<FracFlow>()?;
    m.add_class::<KleField>()?;
    m.add_class::<Mlp>()?;
    Ok(())
}
