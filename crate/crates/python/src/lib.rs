//! Python bindings: networks, Gramian spectra, alignment energies, the
//! sampled Fourier transform and configuration-driven experiments.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use kernelscope::fourier::{dominant_frequency, sampled_ft, GridSpec};
use kernelscope::harness::{self, ExperimentConfig, Layout};
use kernelscope::nn::{Activation, Model, NetworkConfig};
use kernelscope::spectral::{eig_sym, Gramian};
use kernelscope::{alignment, io, Error};

fn to_py(err: Error) -> PyErr {
    let msg = format!("{}: {err}", err.kind());
    match err {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Dimension(_) | Error::Config(_) | Error::ZeroVector | Error::Format { .. } => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn activation(name: &str, slope: f64) -> PyResult<Activation> {
    match name {
        "leaky_relu" => Ok(Activation::LeakyRelu { slope }),
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        other => Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
    }
}

/// Scalar-output fully-connected network.
#[pyclass(name = "Network", module = "pykernelscope", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: kernelscope::nn::Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (input_dim, hidden_widths, activation="leaky_relu", slope=0.2, shortcuts=false, seed=0))]
    fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        activation: &str,
        slope: f64,
        shortcuts: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = NetworkConfig::new(input_dim, hidden_widths, self::activation(activation, slope)?)
            .with_shortcuts(shortcuts)
            .with_seed(seed);
        let inner = kernelscope::nn::Network::init(&cfg).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_network(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_network(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().len()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let out = self.inner.forward_batch(&matrix(x)?).map_err(to_py)?;
        Ok(out.iter().copied().collect())
    }

    /// `|theta| x N` matrix of per-sample gradients, as rows.
    fn jacobian(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.jacobian(&matrix(x)?).map_err(to_py)?))
    }

    fn kernel(&self, xa: Vec<Vec<f64>>, xb: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.kernel(&matrix(xa)?, &matrix(xb)?).map_err(to_py)?))
    }

    /// Eigenvalues (decreasing) and eigenvectors (as columns) of the Gramian at `x`.
    fn spectrum(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let g = Gramian::from_model(0, &self.inner, &matrix(x)?).map_err(to_py)?;
        let spec = eig_sym(&g).map_err(to_py)?;
        Ok((spec.eigenvalues.iter().copied().collect(), rows(&spec.eigenvectors)))
    }

    fn __repr__(&self) -> String {
        let cfg = self.inner.config();
        format!(
            "Network(input_dim={}, hidden_widths={:?}, params={})",
            cfg.input_dim,
            cfg.hidden_widths,
            self.inner.params().len()
        )
    }
}

/// Fraction of `||phi||^2` inside the span of the first `k` eigenvector columns.
#[pyfunction]
fn relative_energy(phi: Vec<f64>, eigenvalues: Vec<f64>, eigenvectors: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    let spec = kernelscope::spectral::SpectrumSnapshot::from_parts(
        0,
        DVector::from_vec(eigenvalues),
        matrix(eigenvectors)?,
    )
    .map_err(to_py)?;
    alignment::relative_energy(&DVector::from_vec(phi), &spec, k).map_err(to_py)
}

/// Magnitudes of the sampled Fourier transform on a uniform frequency grid,
/// flattened with the last axis fastest, plus the dominant frequency.
#[pyfunction]
#[pyo3(signature = (phi, x, extent=40.0, resolution=81))]
fn fourier(phi: Vec<f64>, x: Vec<Vec<f64>>, extent: f64, resolution: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let x = matrix(x)?;
    let spec = GridSpec::uniform(x.ncols(), extent, resolution);
    let grid = sampled_ft(&DVector::from_vec(phi), &x, &spec).map_err(to_py)?;
    let peak = dominant_frequency(&grid).map_err(to_py)?;
    Ok((grid.values, peak))
}

#[pyfunction]
fn read_matrix(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&io::read_matrix(&path).map_err(to_py)?))
}

#[pyfunction]
fn write_matrix(path: PathBuf, m: Vec<Vec<f64>>) -> PyResult<()> {
    io::write_matrix(&path, &matrix(m)?).map_err(to_py)
}

/// Trains the experiment described by a TOML config into `out`; returns the final loss.
#[pyfunction]
#[pyo3(signature = (config, out, seed=None))]
fn train(py: Python<'_>, config: PathBuf, out: PathBuf, seed: Option<u64>) -> PyResult<f64> {
    let mut cfg = ExperimentConfig::load(&config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.network.seed = s;
    }
    let exp = py
        .detach(|| harness::train_to_disk(&cfg, &Layout::new(&out)))
        .map_err(to_py)?;
    exp.trace
        .final_record()
        .map(|r| r.loss)
        .ok_or_else(|| PyRuntimeError::new_err("empty training trace"))
}

/// Writes `manifest.json` for an experiment directory; returns the number of files.
#[pyfunction]
fn report(out: PathBuf) -> PyResult<usize> {
    Ok(harness::write_report(&out).map_err(to_py)?.files.len())
}

#[pymodule]
fn pykernelscope(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(relative_energy, m)?)?;
    m.add_function(wrap_pyfunction!(fourier, m)?)?;
    m.add_function(wrap_pyfunction!(read_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(write_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
