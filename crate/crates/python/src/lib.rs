//! Python bindings for `nbl_core`.
//!
//! Matrices cross the boundary as nested lists, one inner list per feature
//! row (`h × N`, tokens along the inner axis), matching the dump layout.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nbl_core::activation_io::{read_dump_file, write_dump_file};
use nbl_core::calibration::{calibrate as run_calibration, synthetic_corpus as corpus};
use nbl_core::cca::cca_bound_for;
use nbl_core::costmodel::{kv_cache_gib as kv_gib, prefill_speedup as speedup};
use nbl_core::ranking::score_layer;
use nbl_core::toymodel::{load_model_file, logit_drift as drift, save_model_file};
use nbl_core::{
    ActivationMatrix, Criterion, DumpHeader, InferenceProfile, NblError, Regularization, Role, SelectionPlan,
    Strategy, ToyConfig, ToyTransformer,
};

fn to_py(e: NblError) -> PyErr {
    match e {
        NblError::Io(io) => PyIOError::new_err(io.to_string()),
        NblError::MissingInput(msg) => PyIOError::new_err(msg),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vector(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

fn regularization(ridge: Option<f64>, floor_rel: Option<f64>) -> Regularization {
    let d = Regularization::default();
    Regularization {
        ridge_rel: ridge.unwrap_or(d.ridge_rel),
        floor_rel: floor_rel.unwrap_or(d.floor_rel),
    }
}

fn criterion(name: &str) -> PyResult<Criterion> {
    match name {
        "cca_bound" => Ok(Criterion::CcaBound),
        "direct_nmse" => Ok(Criterion::DirectNmse),
        "cosine" => Ok(Criterion::Cosine),
        other => Err(PyValueError::new_err(format!("unknown criterion {other:?}"))),
    }
}

#[pyclass(name = "MomentAccumulator", skip_from_py_object)]
struct PyMomentAccumulator {
    inner: nbl_core::MomentAccumulator,
}

#[pymethods]
impl PyMomentAccumulator {
    #[new]
    fn new(h_in: usize, h_out: usize) -> Self {
        PyMomentAccumulator { inner: nbl_core::MomentAccumulator::new(h_in, h_out) }
    }

    /// Adds a batch: `x` is `h_in × N`, `y` is `h_out × N`.
    fn accumulate(&mut self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<()> {
        self.inner.accumulate_f64(&matrix(&x)?, &matrix(&y)?).map_err(to_py)
    }

    fn merge(&mut self, other: PyRef<'_, PyMomentAccumulator>) -> PyResult<()> {
        self.inner.merge_from(&other.inner).map_err(to_py)
    }

    #[getter]
    fn count(&self) -> u64 {
        self.inner.count()
    }

    fn finalize(&self) -> PyResult<PyCovarianceSet> {
        Ok(PyCovarianceSet { inner: self.inner.finalize().map_err(to_py)? })
    }
}

#[pyclass(name = "CovarianceSet", skip_from_py_object)]
struct PyCovarianceSet {
    inner: nbl_core::CovarianceSet,
}

#[pymethods]
impl PyCovarianceSet {
    #[getter]
    fn sample_count(&self) -> u64 {
        self.inner.sample_count
    }

    #[getter]
    fn mean_x(&self) -> Vec<f64> {
        vector(&self.inner.mean_x)
    }

    #[getter]
    fn mean_y(&self) -> Vec<f64> {
        vector(&self.inner.mean_y)
    }

    #[getter]
    fn c_xx(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.c_xx)
    }

    #[getter]
    fn c_yy(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.c_yy)
    }

    #[getter]
    fn c_yx(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.c_yx)
    }

    /// Moments of `(X, X + Y)`.
    fn derive_residual(&self) -> PyResult<PyCovarianceSet> {
        Ok(PyCovarianceSet { inner: self.inner.derive_residual().map_err(to_py)? })
    }

    /// `(bound, rho)` with rho descending.
    #[pyo3(signature = (ridge=None, floor_rel=None))]
    fn cca_bound(&self, ridge: Option<f64>, floor_rel: Option<f64>) -> PyResult<(f64, Vec<f64>)> {
        let (spec, bound) = cca_bound_for(&self.inner, &regularization(ridge, floor_rel)).map_err(to_py)?;
        Ok((bound, spec.rho))
    }

    #[pyo3(signature = (ridge=None, floor_rel=None))]
    fn direct_nmse(&self, ridge: Option<f64>, floor_rel: Option<f64>) -> PyResult<f64> {
        nbl_core::direct_nmse(&self.inner, &regularization(ridge, floor_rel)).map_err(to_py)
    }

    #[pyo3(signature = (layer=0, ridge=None, floor_rel=None))]
    fn fit(&self, layer: usize, ridge: Option<f64>, floor_rel: Option<f64>) -> PyResult<PyLinearMap> {
        let map = nbl_core::fit_lmmse(&self.inner, layer, &regularization(ridge, floor_rel)).map_err(to_py)?;
        Ok(PyLinearMap { inner: map })
    }
}

#[pyclass(name = "LinearMap", skip_from_py_object)]
struct PyLinearMap {
    inner: nbl_core::LinearMap,
}

#[pymethods]
impl PyLinearMap {
    #[getter]
    fn weight(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.weight)
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        vector(&self.inner.bias)
    }

    #[getter]
    fn source_layer(&self) -> usize {
        self.inner.source_layer
    }

    #[getter]
    fn fit_nmse(&self) -> f64 {
        self.inner.fit_nmse
    }

    /// `W·x + b` on an `h_in × N` matrix.
    fn apply(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.apply_f64(&matrix(&x)?).map_err(to_py)?))
    }
}

#[pyclass(name = "ToyModel", skip_from_py_object)]
struct PyToyModel {
    inner: ToyTransformer,
}

#[pymethods]
impl PyToyModel {
    #[staticmethod]
    #[pyo3(signature = (layers=8, d_model=64, heads=4, kv_groups=2, d_ff=256, vocab=256, max_len=128, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn random(
        layers: usize,
        d_model: usize,
        heads: usize,
        kv_groups: usize,
        d_ff: usize,
        vocab: usize,
        max_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ToyConfig { layers, d_model, heads, kv_groups, d_ff, vocab, max_len, seed };
        Ok(PyToyModel { inner: ToyTransformer::init_random(config).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyToyModel { inner: load_model_file(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model_file(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.config.d_model
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.config.vocab
    }

    fn attention_layers(&self) -> Vec<usize> {
        self.inner.attention_layers()
    }

    fn is_linearized(&self, layer: usize) -> bool {
        self.inner.is_linearized(layer)
    }

    /// `T × V` logits, one row per position.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.logits(&tokens).map_err(to_py)?))
    }

    fn perplexity(&self, tokens: Vec<u32>) -> PyResult<f64> {
        self.inner.perplexity(&tokens).map_err(to_py)
    }

    /// Per-layer `(X, Y)` moments over `sequences`, in layer order.
    #[pyo3(signature = (sequences, layers=None))]
    fn calibrate(&self, sequences: Vec<Vec<u32>>, layers: Option<Vec<usize>>) -> PyResult<Vec<PyCovarianceSet>> {
        let layers = layers.unwrap_or_else(|| (0..self.inner.num_layers()).collect());
        run_calibration(&self.inner, &sequences, &layers)
            .map_err(to_py)?
            .iter()
            .map(|acc| Ok(PyCovarianceSet { inner: acc.finish().map_err(to_py)?.covariances }))
            .collect()
    }

    /// Scores of every layer under `criterion`, ascending.
    #[pyo3(signature = (sequences, criterion="cca_bound"))]
    fn rank(&self, sequences: Vec<Vec<u32>>, criterion: &str) -> PyResult<Vec<(usize, f64)>> {
        let c = self::criterion(criterion)?;
        let layers: Vec<usize> = self.inner.attention_layers();
        let reg = Regularization::default();
        let mut scores = run_calibration(&self.inner, &sequences, &layers)
            .map_err(to_py)?
            .iter()
            .map(|acc| score_layer(&acc.finish()?, c, &reg))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?;
        nbl_core::ranking::sort_scores(&mut scores);
        Ok(scores.iter().map(|s| (s.layer_index, s.score)).collect())
    }

    /// New model with `maps` substituted at their source layers.
    fn substitute(&self, maps: Vec<PyRef<'_, PyLinearMap>>) -> PyResult<PyToyModel> {
        let maps: Vec<nbl_core::LinearMap> = maps.iter().map(|m| m.inner.clone()).collect();
        let plan = SelectionPlan {
            layers: maps.iter().map(|m| m.source_layer).collect(),
            criterion: Criterion::CcaBound,
            strategy: Strategy::OneShot,
        };
        Ok(PyToyModel { inner: self.inner.substitute(&plan, &maps).map_err(to_py)? })
    }
}

/// `(mean KL, max |Δlogit|)` between two models over `sequences`.
#[pyfunction]
fn logit_drift(a: PyRef<'_, PyToyModel>, b: PyRef<'_, PyToyModel>, sequences: Vec<Vec<u32>>) -> PyResult<(f64, f64)> {
    let d = drift(&a.inner, &b.inner, &sequences).map_err(to_py)?;
    Ok((d.mean_kl, d.max_abs))
}

#[pyfunction]
fn synthetic_corpus(seed: u64, total_tokens: usize, seq_len: usize, vocab: usize) -> PyResult<Vec<Vec<u32>>> {
    corpus(seed, total_tokens, seq_len, vocab).map_err(to_py)
}

/// Writes an NBLA dump; `data` is `h × N`.
#[pyfunction]
fn write_dump(path: PathBuf, layer: u16, role: &str, data: Vec<Vec<f64>>) -> PyResult<u64> {
    let role = match role {
        "input" => Role::Input,
        "output" => Role::Output,
        other => return Err(PyValueError::new_err(format!("role must be 'input' or 'output', got {other:?}"))),
    };
    let m = ActivationMatrix::from_f64(&matrix(&data)?).map_err(to_py)?;
    let header = DumpHeader::new(layer, role, m.rows() as u32, m.cols() as u64);
    write_dump_file(&path, &header, &m).map_err(to_py)
}

/// `(layer, role, data)` with `data` as `h × N` lists.
#[pyfunction]
fn read_dump(path: PathBuf) -> PyResult<(u16, String, Vec<Vec<f64>>)> {
    let (header, m) = read_dump_file(&path).map_err(to_py)?;
    Ok((header.layer_index, header.role.name().to_string(), rows(&m.to_f64())))
}

#[allow(clippy::too_many_arguments)]
fn profile(context: u64, m: u64, layers: u64, d_model: u64, batch: u64, heads: u64, kv_groups: u64, bytes: u64) -> InferenceProfile {
    InferenceProfile { layers, linearized: m, context, d_model, batch, heads, kv_groups, bytes_per_elem: bytes }
}

#[pyfunction]
#[pyo3(signature = (context, m, layers=32, d_model=4096, batch=64, heads=32, kv_groups=8, bytes=2))]
#[allow(clippy::too_many_arguments)]
fn kv_cache_gib(context: u64, m: u64, layers: u64, d_model: u64, batch: u64, heads: u64, kv_groups: u64, bytes: u64) -> PyResult<f64> {
    kv_gib(&profile(context, m, layers, d_model, batch, heads, kv_groups, bytes)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (context, m, layers=32, d_model=4096))]
fn prefill_speedup(context: u64, m: u64, layers: u64, d_model: u64) -> PyResult<f64> {
    speedup(&profile(context, m, layers, d_model, 1, 1, 1, 1)).map_err(to_py)
}

#[pymodule]
fn nbl(module: &Bound<'_, PyModule>) -> PyResult<()> {
    module.add_class::<PyMomentAccumulator>()?;
    module.add_class::<PyCovarianceSet>()?;
    module.add_class::<PyLinearMap>()?;
    module.add_class::<PyToyModel>()?;
    module.add_function(wrap_pyfunction!(logit_drift, module)?)?;
    module.add_function(wrap_pyfunction!(synthetic_corpus, module)?)?;
    module.add_function(wrap_pyfunction!(write_dump, module)?)?;
    module.add_function(wrap_pyfunction!(read_dump, module)?)?;
    module.add_function(wrap_pyfunction!(kv_cache_gib, module)?)?;
    module.add_function(wrap_pyfunction!(prefill_speedup, module)?)?;
    Ok(())
}
