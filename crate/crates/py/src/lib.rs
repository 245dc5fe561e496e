//! Python bindings for the federated momentum simulator.
//!
//! Exposes the dense network, the momentum accumulator (live and reversed
//! estimates), Dirichlet partitioning, evaluation metrics, and the experiment
//! runner. Arrays cross the boundary as plain Python lists; heavy work stays
//! in Rust.

use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fedmom::data::{self, PartitionConfig};
use fedmom::experiment::{self, CellKey, ExperimentConfig};
use fedmom::metrics;
use fedmom::nn::{self, MlpArchitecture};
use fedmom::optim::MomentumState;
use fedmom::stream::stream_rng;

fn err(e: fedmom::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have unequal lengths"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Two-layer ReLU network with softmax output, parameters as one flat vector.
#[pyclass]
struct Mlp {
    arch: MlpArchitecture,
}

#[pymethods]
impl Mlp {
    #[new]
    fn new(input_dim: usize, hidden_dim: usize, output_dim: usize) -> PyResult<Self> {
        Ok(Self {
            arch: MlpArchitecture::new(input_dim, hidden_dim, output_dim).map_err(err)?,
        })
    }

    fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, "init", 0, 0);
        nn::init_params(&self.arch, &mut rng).to_vec()
    }

    fn loss_and_grad(
        &self,
        params: Vec<f64>,
        x: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> PyResult<(f64, Vec<f64>)> {
        let params = Array1::from_vec(params);
        let x = to_matrix(x)?;
        let (loss, grad) =
            nn::loss_and_grad(&self.arch, params.view(), x.view(), &labels).map_err(err)?;
        Ok((loss, grad.to_vec()))
    }

    fn predict(&self, params: Vec<f64>, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let params = Array1::from_vec(params);
        let x = to_matrix(x)?;
        nn::predict_all(&self.arch, params.view(), x.view()).map_err(err)
    }
}

/// Momentum buffer tracking both the live value and the reversed estimate.
#[pyclass]
struct MomentumAccumulator {
    state: MomentumState,
}

#[pymethods]
impl MomentumAccumulator {
    #[new]
    fn new(beta: f64, start: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            state: MomentumState::new(beta, Array1::from_vec(start)).map_err(err)?,
        })
    }

    fn observe(&mut self, grad: Vec<f64>) -> PyResult<()> {
        self.state.observe(Array1::from_vec(grad).view()).map_err(err)
    }

    fn live(&self) -> Vec<f64> {
        self.state.v.to_vec()
    }

    fn reversed(&self) -> PyResult<Vec<f64>> {
        Ok(self.state.reversed_estimate().map_err(err)?.to_vec())
    }
}

/// Per-client sample indices under a Dirichlet(alpha) label partition.
#[pyfunction]
fn partition_indices(
    labels: Vec<usize>,
    num_classes: usize,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    let partition = data::partition_dirichlet(
        &labels,
        num_classes,
        &PartitionConfig {
            num_clients,
            alpha,
            seed,
        },
    )
    .map_err(err)?;
    Ok(partition.clients)
}

#[pyfunction]
fn accuracy(y_true: Vec<usize>, y_pred: Vec<usize>) -> PyResult<f64> {
    metrics::accuracy(&y_true, &y_pred).map_err(err)
}

#[pyfunction]
fn macro_f1(y_true: Vec<usize>, y_pred: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    metrics::macro_f1(&y_true, &y_pred, num_classes).map_err(err)
}

/// Mean cosine and mean projection of client gradients onto their mean.
#[pyfunction]
fn step_divergence(grads: Vec<Vec<f64>>) -> PyResult<(f64, f64, usize)> {
    let arrays: Vec<Array1<f64>> = grads.into_iter().map(Array1::from_vec).collect();
    let d = metrics::step_divergence(&arrays).map_err(err)?;
    Ok((d.mean_cosine, d.mean_projection, d.num_clients))
}

/// Runs every cell of a TOML experiment config; returns (trained, skipped)
/// cell names. Completed cells on disk are skipped.
#[pyfunction]
#[pyo3(signature = (config_toml, seed=None))]
fn run_experiment(config_toml: &str, seed: Option<u64>) -> PyResult<(Vec<String>, Vec<String>)> {
    let config = ExperimentConfig::from_toml_str(config_toml).map_err(err)?;
    let report = experiment::run_experiment(&config, seed).map_err(err)?;
    Ok((report.trained, report.skipped))
}

/// Summarizes a completed run directory; returns the text results table and
/// writes summary/curve CSVs next to the round CSVs.
#[pyfunction]
fn summarize(run_dir: &str) -> PyResult<String> {
    let config = experiment::load_manifest(run_dir).map_err(err)?;
    let records = experiment::load_all_records(run_dir, &config).map_err(err)?;
    let summary = experiment::summarize(&config, &records).map_err(err)?;
    experiment::write_summary_files(run_dir, &records, &summary).map_err(err)?;
    Ok(summary.text_table())
}

/// One divergence row: (round, k, mean_cosine, mean_projection, num_clients).
type DivergenceRow = (usize, usize, f64, f64, usize);

/// Runs one cell with gradient logging; returns divergence rows plus the
/// Spearman trend of step vs cosine and vs projection.
#[pyfunction]
#[pyo3(signature = (config_toml, algorithm=None, lr=None, seed=None))]
fn diagnose(
    config_toml: &str,
    algorithm: Option<&str>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> PyResult<(Vec<DivergenceRow>, f64, f64)> {
    let config = ExperimentConfig::from_toml_str(config_toml).map_err(err)?;
    let cell = CellKey {
        algorithm: match algorithm {
            Some(name) => name.parse().map_err(err)?,
            None => config.algorithm_list().map_err(err)?[0],
        },
        lr: lr.unwrap_or(config.lr_grid[0]),
        seed: seed.unwrap_or(config.seeds[0]),
    };
    let records = experiment::run_diagnostics(&config, cell).map_err(err)?;
    let (rho_cos, rho_proj) = metrics::divergence_trend(&records).map_err(err)?;
    let rows = records
        .iter()
        .map(|r| (r.round, r.k, r.mean_cosine, r.mean_projection, r.num_clients))
        .collect();
    Ok((rows, rho_cos, rho_proj))
}

#[pymodule]
fn fedmom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mlp>()?;
    m.add_class::<MomentumAccumulator>()?;
    m.add_function(wrap_pyfunction!(partition_indices, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(step_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    Ok(())
}
