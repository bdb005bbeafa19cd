//! Python bindings for `keyframe_core`.
//!
//! Vectors cross the boundary as Python lists of floats; frame matrices as
//! lists of rows.

use std::path::PathBuf;

use keyframe_core::infotheory as it;
use keyframe_core::io;
use keyframe_core::numerics::Prng;
use keyframe_core::scoring::{self, FrameEmbedding, QueryEmbedding};
use keyframe_core::selection::{self, EvidenceSegment, Selection, SelectionConfig};
use keyframe_core::synthetic::random_gradcheck_instance;
use keyframe_core::training::{self, TrainConfig, TrainingExample};
use keyframe_core::Error;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for keyframe_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// `(frames, query, positive_mask)`.
type RawExample = (Vec<Vec<f64>>, Vec<f64>, Vec<bool>);

fn frames_from(rows: Vec<Vec<f64>>) -> PyResult<Vec<FrameEmbedding>> {
    rows.into_iter()
        .map(|r| FrameEmbedding::new(r).py())
        .collect()
}

fn segments_from(pairs: Vec<(f64, f64)>) -> PyResult<Vec<EvidenceSegment>> {
    pairs
        .into_iter()
        .map(|(s, e)| EvidenceSegment::new(s, e).py())
        .collect()
}

/// Discrete joint model over frame variables and an answer.
#[pyclass(name = "DiscreteModel", module = "keyframe_py")]
struct PyDiscreteModel {
    inner: it::DiscreteModel,
}

#[pymethods]
impl PyDiscreteModel {
    #[staticmethod]
    fn xor() -> Self {
        Self {
            inner: it::DiscreteModel::xor(),
        }
    }

    #[staticmethod]
    fn copy() -> Self {
        Self {
            inner: it::DiscreteModel::copy(),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (n_frames, seed, frame_alphabet = 2, answer_alphabet = 2))]
    fn random_factorized(
        n_frames: usize,
        seed: u64,
        frame_alphabet: usize,
        answer_alphabet: usize,
    ) -> PyResult<Self> {
        let mut rng = Prng::new(seed);
        Ok(Self {
            inner: it::DiscreteModel::random_factorized(
                n_frames,
                frame_alphabet,
                answer_alphabet,
                &mut rng,
            )
            .py()?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: it::DiscreteModel::from_json(text).py()?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json(None)
    }

    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn is_factorized(&self) -> bool {
        self.inner.is_factorized()
    }

    fn answer_entropy(&self) -> f64 {
        self.inner.answer_entropy()
    }

    fn conditional_mi(&self, subset: Vec<usize>) -> PyResult<f64> {
        it::conditional_mi(&self.inner, &subset).py()
    }

    fn modular_upper_bound(&self, subset: Vec<usize>) -> PyResult<f64> {
        it::modular_upper_bound(&self.inner, &subset).py()
    }

    fn exhaustive_select(&self, m: usize) -> PyResult<(Vec<usize>, f64)> {
        let s = it::exhaustive_select(&self.inner, m).py()?;
        Ok((s.subset, s.value))
    }

    fn greedy_select(&self, m: usize) -> PyResult<(Vec<usize>, f64)> {
        let s = it::greedy_select(&self.inner, m).py()?;
        Ok((s.subset, s.value))
    }

    fn modular_select(&self, m: usize) -> PyResult<(Vec<usize>, f64)> {
        let s = it::modular_select(&self.inner, m).py()?;
        Ok((s.subset, s.value))
    }

    /// `(submodularity violations, monotonicity violations)`.
    fn check_submodular(&self) -> PyResult<(usize, usize)> {
        let v = it::check_submodular(&self.inner).py()?;
        let sub = v.iter().filter(|x| x.is_submodularity()).count();
        Ok((sub, v.len() - sub))
    }

    fn __repr__(&self) -> String {
        format!(
            "DiscreteModel(n_frames={}, factorized={})",
            self.inner.n_frames(),
            self.inner.is_factorized()
        )
    }
}

#[pyclass(
    name = "ScorerConfig",
    module = "keyframe_py",
    get_all,
    set_all,
    from_py_object
)]
#[derive(Clone)]
struct PyScorerConfig {
    dim: usize,
    subspaces: usize,
    window: usize,
    lambda_init: f64,
    seed: u64,
}

#[pymethods]
impl PyScorerConfig {
    #[new]
    #[pyo3(signature = (dim = 768, subspaces = 8, window = 8, lambda_init = 0.5, seed = 0))]
    fn new(dim: usize, subspaces: usize, window: usize, lambda_init: f64, seed: u64) -> Self {
        Self {
            dim,
            subspaces,
            window,
            lambda_init,
            seed,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "ScorerConfig(dim={}, subspaces={}, window={}, lambda_init={}, seed={})",
            self.dim, self.subspaces, self.window, self.lambda_init, self.seed
        )
    }
}

impl From<&PyScorerConfig> for scoring::ScorerConfig {
    fn from(c: &PyScorerConfig) -> Self {
        Self {
            dim: c.dim,
            subspaces: c.subspaces,
            window: c.window,
            lambda_init: c.lambda_init,
            seed: c.seed,
        }
    }
}

impl From<&scoring::ScorerConfig> for PyScorerConfig {
    fn from(c: &scoring::ScorerConfig) -> Self {
        Self {
            dim: c.dim,
            subspaces: c.subspaces,
            window: c.window,
            lambda_init: c.lambda_init,
            seed: c.seed,
        }
    }
}

/// Query-conditioned evidence scorer with its parameters.
#[pyclass(name = "Scorer", module = "keyframe_py")]
struct PyScorer {
    config: scoring::ScorerConfig,
    params: scoring::ScorerParams,
    train_seed: u64,
}

#[pymethods]
impl PyScorer {
    /// Freshly initialized from `config.seed`.
    #[new]
    fn new(config: &PyScorerConfig) -> PyResult<Self> {
        let config: scoring::ScorerConfig = config.into();
        let params = scoring::init_scorer(&config).py()?;
        Ok(Self {
            config,
            params,
            train_seed: 0,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = io::load_checkpoint(&path).py()?;
        Ok(Self {
            config: c.config,
            params: c.params,
            train_seed: c.train_seed,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = io::Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            train_seed: self.train_seed,
        };
        io::save_checkpoint(&path, &ckpt).py()
    }

    #[getter]
    fn config(&self) -> PyScorerConfig {
        (&self.config).into()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    #[getter]
    fn blend_weight(&self) -> f64 {
        self.params.lambda()
    }

    /// SHA-256 hex digest of the parameter values.
    fn checksum(&self) -> String {
        training::params_checksum(&self.params)
    }

    fn score(&self, frames: Vec<Vec<f64>>, query: Vec<f64>) -> PyResult<Vec<f64>> {
        let frames = frames_from(frames)?;
        let query = QueryEmbedding::new(query).py()?;
        Ok(
            scoring::score_frames(&frames, &query, &self.params, &self.config)
                .py()?
                .0,
        )
    }

    /// Trains in place on `(frames, query, positive_mask)` triples and returns
    /// per-epoch mean losses.
    #[pyo3(signature = (examples, learning_rate = 1e-3, epochs = 5, batch_size = 128, seed = 0))]
    fn fit(
        &mut self,
        examples: Vec<RawExample>,
        learning_rate: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let dataset = examples
            .into_iter()
            .map(|(f, q, m)| {
                TrainingExample::new(frames_from(f)?, QueryEmbedding::new(q).py()?, m).py()
            })
            .collect::<PyResult<Vec<_>>>()?;
        let cfg = TrainConfig {
            learning_rate,
            epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        let (params, report) =
            training::train_from(self.params.clone(), &dataset, &self.config, &cfg).py()?;
        self.params = params;
        self.train_seed = seed;
        Ok(report.epoch_losses)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scorer(dim={}, subspaces={}, window={}, parameters={})",
            self.config.dim,
            self.config.subspaces,
            self.config.window,
            self.params.num_parameters()
        )
    }
}

#[pyfunction]
fn infonce_loss(scores: Vec<f64>, mask: Vec<bool>) -> PyResult<f64> {
    training::infonce_loss(&scores, &mask).py()
}

#[pyfunction]
fn label_frames(segments: Vec<(f64, f64)>, n_frames: usize, fps: f64) -> PyResult<Vec<bool>> {
    training::label_frames(&segments_from(segments)?, n_frames, fps).py()
}

#[pyfunction]
#[pyo3(signature = (scores, bins, per_bin = 1))]
fn select(scores: Vec<f64>, bins: usize, per_bin: usize) -> PyResult<Vec<usize>> {
    let config = SelectionConfig::new(bins, per_bin).py()?;
    Ok(selection::select(&scores, &config).py()?.indices)
}

#[pyfunction]
fn uniform_select(n: usize, m: usize) -> Vec<usize> {
    selection::uniform_select(n, m).indices
}

#[pyfunction]
fn coverage(indices: Vec<usize>, segments: Vec<(f64, f64)>, fps: f64) -> PyResult<bool> {
    if !(fps > 0.0) {
        return Err(PyValueError::new_err(format!(
            "fps must be positive, got {fps}"
        )));
    }
    let sel = Selection {
        indices,
        scores: None,
    };
    Ok(selection::coverage(&sel, &segments_from(segments)?, fps))
}

#[pyfunction]
fn load_embeddings(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(io::load_embeddings(&path).py()?.to_f64_rows())
}

/// Rows are narrowed to 32-bit floats on disk.
#[pyfunction]
fn save_embeddings(path: PathBuf, rows: Vec<Vec<f64>>) -> PyResult<()> {
    let m = io::EmbeddingMatrix::from_f64_rows(&rows).py()?;
    io::save_embeddings(&path, &m).py()
}

#[pyfunction]
fn load_annotations<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    io::load_annotations(&path)
        .py()?
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("query_id", r.query_id)?;
            d.set_item("video_id", r.video_id)?;
            d.set_item("fps", r.fps)?;
            d.set_item("n_frames", r.n_frames)?;
            let segs: Vec<(f64, f64)> = r.segments.iter().map(|&[s, e]| (s, e)).collect();
            d.set_item("segments", segs)?;
            Ok(d)
        })
        .collect()
}

/// Max relative error between analytic and finite-difference gradients on a
/// random instance.
#[pyfunction]
#[pyo3(signature = (seed = 0, n_frames = 5, dim = 6, subspaces = 2, window = 3, eps = 1e-5))]
fn gradcheck(
    seed: u64,
    n_frames: usize,
    dim: usize,
    subspaces: usize,
    window: usize,
    eps: f64,
) -> PyResult<f64> {
    let (example, params, config) =
        random_gradcheck_instance(seed, n_frames, dim, subspaces, window).py()?;
    Ok(training::gradient_check(&example, &params, &config, eps)
        .py()?
        .max_relative_error)
}

#[pymodule]
fn keyframe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDiscreteModel>()?;
    m.add_class::<PyScorerConfig>()?;
    m.add_class::<PyScorer>()?;
    m.add_function(wrap_pyfunction!(infonce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(label_frames, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_select, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(load_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(save_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(load_annotations, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
