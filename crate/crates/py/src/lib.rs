//! Python bindings: datasets, checkpoints, metrics and the command line.
use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;

use opbasis::dataset::{self, DatasetSpec, MultifidelityDataset};
use opbasis::grid::{self, FunctionSample, Grid};
use opbasis::model::OperatorModel;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sample(dim: usize, values: Vec<f64>) -> PyResult<FunctionSample> {
    let n = values.len();
    let r = match dim {
        1 => n,
        2 => (n as f64).sqrt().round() as usize,
        _ => return Err(value_err(format!("dimension {dim}"))),
    };
    let g = Grid::new(dim, r).map_err(value_err)?;
    FunctionSample::new(g, values).map_err(value_err)
}

/// True when one grid's nodes are a subset of the other's.
#[pyfunction]
fn grids_overlap(ra: usize, rb: usize) -> bool {
    grid::grids_overlap(ra, rb)
}

/// Expected nodes per sample, `Σ p_i R_i^d`.
#[pyfunction]
fn average_data_size(n: usize, resolutions: Vec<usize>, proportions: Vec<f64>, dim: usize) -> PyResult<f64> {
    let spec = DatasetSpec::new(n, resolutions, proportions).map_err(value_err)?;
    Ok(dataset::average_data_size(&spec, dim))
}

/// Relative L1 error of two samples on the same grid, row-major values.
#[pyfunction]
#[pyo3(signature = (pred, truth, dim=1))]
fn relative_l1_error(pred: Vec<f64>, truth: Vec<f64>, dim: usize) -> PyResult<f64> {
    opbasis::eval::relative_l1_error(&sample(dim, pred)?, &sample(dim, truth)?).map_err(value_err)
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("opbasis".to_string()).chain(args).collect();
    py.detach(|| opbasis::cli::main_with_args(argv))
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: MultifidelityDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: MultifidelityDataset::load(&path).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn problem(&self) -> String {
        self.inner.provenance().problem.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn resolutions(&self) -> Vec<usize> {
        self.inner.spec().resolutions().to_vec()
    }

    #[getter]
    fn generator_digest(&self) -> String {
        self.inner.provenance().digest()
    }

    /// `(R, input values, output values)` of sample `i`.
    fn sample(&self, i: usize) -> PyResult<(usize, Vec<f64>, Vec<f64>)> {
        let s = self
            .inner
            .samples()
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("sample {i} of {}", self.inner.len())))?;
        Ok((s.grid().points_per_axis(), s.input.values().to_vec(), s.output.values().to_vec()))
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: OperatorModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: OperatorModel::load(&path).map_err(value_err)?,
        })
    }

    #[getter]
    fn problem(&self) -> String {
        self.inner.problem().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    /// Prediction on an `out_resolution` grid from input values on any grid.
    fn predict(&self, values: Vec<f64>, out_resolution: usize) -> PyResult<Vec<f64>> {
        let input = sample(self.inner.dim(), values)?;
        let out = Grid::new(self.inner.dim(), out_resolution).map_err(value_err)?;
        Ok(self.inner.forward(&input, &out).map_err(value_err)?.into_values())
    }
}

#[pymodule]
#[pyo3(name = "opbasis")]
fn opbasis_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(grids_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(average_data_size, m)?)?;
    m.add_function(wrap_pyfunction!(relative_l1_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
