//! Python bindings. Vectors cross the boundary as lists of floats; structured
//! results come back as dicts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vlaad_core::datakit::{generate_synthetic_dataset, load_manifest, write_manifest, SynthConfig};
use vlaad_core::embeddings::{Encoder, FrameWindow};
use vlaad_core::evalkit::{self, LeaderboardVersion, PenaltyParams, ScoredSet, WilcoxonOptions};
use vlaad_core::{inference, mil, model, trainer, Bag, Embedding, Source, VlaadError};

fn py_err(e: VlaadError) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn io_err(e: std::io::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn scored(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<ScoredSet> {
    ScoredSet::new(scores, labels).map_err(py_err)
}

fn parse_version(v: &str) -> PyResult<LeaderboardVersion> {
    match v {
        "v20" => Ok(LeaderboardVersion::V20),
        "v21" => Ok(LeaderboardVersion::V21),
        other => Err(PyValueError::new_err(format!("version must be 'v20' or 'v21', got '{other}'"))),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(config: Option<&str>) -> PyResult<T> {
    match config {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
        None => Ok(T::default()),
    }
}

#[pyfunction]
#[pyo3(signature = (z, gamma = mil::DEFAULT_GAMMA))]
fn lse_pool(z: Vec<f64>, gamma: f64) -> PyResult<f64> {
    mil::lse_pool(&z, gamma).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (z, gamma = mil::DEFAULT_GAMMA))]
fn pooling_attention(z: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    mil::pooling_attention(&z, gamma).map_err(py_err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evalkit::roc_auc(&scored(scores, labels)?).map_err(py_err)
}

/// Returns `(threshold, J, degenerate)`.
#[pyfunction]
fn youden_threshold(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<(f64, f64, bool)> {
    let y = evalkit::youden_threshold(&scored(scores, labels)?).map_err(py_err)?;
    Ok((y.threshold, y.j, y.degenerate))
}

#[pyfunction]
fn threshold_metrics<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<bool>,
    tau: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = evalkit::threshold_metrics(&scored(scores, labels)?, tau);
    let d = PyDict::new(py);
    d.set_item("f1", m.f1)?;
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("tpr", m.tpr)?;
    d.set_item("fpr", m.fpr)?;
    d.set_item("tp", m.tp)?;
    d.set_item("fp", m.fp)?;
    d.set_item("tn", m.tn)?;
    d.set_item("fn", m.fn_)?;
    Ok(d)
}

/// `params` replaces the default coefficients (v21) or factors (v20).
#[pyfunction]
#[pyo3(signature = (counts, version = "v21", params = None))]
fn infraction_penalty(
    counts: BTreeMap<String, i64>,
    version: &str,
    params: Option<BTreeMap<String, f64>>,
) -> PyResult<f64> {
    let version = parse_version(version)?;
    let params = match (params, version) {
        (None, v) => PenaltyParams::defaults(v),
        (Some(p), LeaderboardVersion::V20) => PenaltyParams::V20(p),
        (Some(p), LeaderboardVersion::V21) => PenaltyParams::V21(p),
    };
    evalkit::infraction_penalty(&counts, &params).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (deltas, exact_max_n = evalkit::EXACT_MAX_N, continuity_correction = true))]
fn wilcoxon_signed_rank<'py>(
    py: Python<'py>,
    deltas: Vec<f64>,
    exact_max_n: usize,
    continuity_correction: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = WilcoxonOptions {
        exact_max_n,
        continuity_correction,
    };
    let r = evalkit::wilcoxon_signed_rank_with(&deltas, opts).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("W", r.w)?;
    d.set_item("n", r.n_effective)?;
    d.set_item("p", r.p_one_sided)?;
    let method = serde_json::to_value(r.method).expect("method serializes");
    d.set_item("method", method.as_str())?;
    Ok(d)
}

/// `[risk, ego_velocity, onehot(command)]`.
#[pyfunction]
fn make_global_state(risk: f64, ego_velocity: f64, command: usize, n_commands: usize) -> PyResult<Vec<f64>> {
    inference::make_global_state(risk, ego_velocity, command, n_commands)
        .map(|s| s.to_vec())
        .map_err(py_err)
}

/// Writes a synthetic manifest; `config` is a JSON object of SynthConfig keys.
#[pyfunction]
#[pyo3(signature = (path, config = None))]
fn synthesize(path: PathBuf, config: Option<&str>) -> PyResult<usize> {
    let cfg: SynthConfig = parse_json(config)?;
    let records = generate_synthetic_dataset(&cfg).map_err(py_err)?;
    let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
    write_manifest(&mut w, &records).map_err(py_err)?;
    w.flush().map_err(io_err)?;
    Ok(records.len())
}

/// Trains on a manifest with the stub encoder; `config` is a JSON object of
/// TrainConfig keys. Returns the checkpoint and the per-epoch history.
#[pyfunction]
#[pyo3(signature = (manifest, config = None, encoder_seed = 0))]
fn train<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    config: Option<&str>,
    encoder_seed: u64,
) -> PyResult<(Checkpoint, Vec<Bound<'py, PyDict>>)> {
    let cfg: trainer::TrainConfig = parse_json(config)?;
    let records = load_manifest(&manifest).map_err(py_err)?;
    let enc = vlaad_core::StubEncoder::new(cfg.embedding_dim, encoder_seed).map_err(py_err)?;
    let out = py.detach(|| trainer::train(&cfg, &records, &enc)).map_err(py_err)?;
    let history = out
        .history
        .iter()
        .map(|h| {
            let d = PyDict::new(py);
            d.set_item("epoch", h.epoch)?;
            d.set_item("L_sim", h.l_sim)?;
            d.set_item("L_cls", h.l_cls)?;
            d.set_item("s_sim", h.s_sim)?;
            d.set_item("s_cls", h.s_cls)?;
            d.set_item("L_total", h.l_total)?;
            d.set_item("val_auc", h.val_auc)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((Checkpoint { inner: out.checkpoint }, history))
}

#[pyclass(module = "vlaad", frozen)]
struct StubEncoder {
    inner: vlaad_core::StubEncoder,
}

#[pymethods]
impl StubEncoder {
    #[new]
    #[pyo3(signature = (dim, seed = 0))]
    fn new(dim: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: vlaad_core::StubEncoder::new(dim, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Frames are sampled at 4 Hz.
    fn encode_video(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let ts = (0..frames.len()).map(|i| i as f64 / 4.0).collect();
        let window = FrameWindow::new(frames, ts).map_err(py_err)?;
        Ok(vlaad_core::encode_video_snippet(&window, &self.inner).map_err(py_err)?.values)
    }

    fn encode_text(&self, caption: &str) -> PyResult<Vec<f64>> {
        Ok(vlaad_core::encode_text(caption, &self.inner).map_err(py_err)?.values)
    }

    fn __repr__(&self) -> String {
        format!("StubEncoder(dim={}, seed={})", self.inner.dim(), self.inner.seed())
    }
}

#[pyclass(module = "vlaad", skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: model::ModelCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[new]
    #[pyo3(signature = (dim, hidden, gamma = mil::DEFAULT_GAMMA, seed = 0, residual_identity = true))]
    fn new(dim: usize, hidden: usize, gamma: f64, seed: u64, residual_identity: bool) -> PyResult<Self> {
        Ok(Self {
            inner: model::ModelCheckpoint::init(dim, hidden, gamma, seed, residual_identity).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let f = File::open(path).map_err(io_err)?;
        Ok(Self {
            inner: model::ModelCheckpoint::read_from(BufReader::new(f)).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.inner.write_to(&mut w).map_err(py_err)?;
        w.flush().map_err(io_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hidden()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn epoch(&self) -> u32 {
        self.inner.epoch
    }

    /// Scores one bag of snippet embeddings.
    fn forward<'py>(&self, py: Python<'py>, snippets: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let starts = (0..snippets.len()).map(|i| i as f64).collect();
        let snippets = snippets
            .into_iter()
            .map(|v| Embedding::new(v, Source::Video))
            .collect::<vlaad_core::Result<Vec<_>>>()
            .map_err(py_err)?;
        let bag = Bag::new("bag", snippets, starts, false).map_err(py_err)?;
        let t = model::forward_bag(&bag, &self.inner).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("attention", t.attention())?;
        d.set_item("logits", t.logits)?;
        d.set_item("pooled", t.pooled)?;
        d.set_item("probability", t.probability)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(dim={}, hidden={}, gamma={}, epoch={})",
            self.inner.dim(),
            self.inner.hidden(),
            self.inner.gamma,
            self.inner.epoch
        )
    }
}

#[pyclass(module = "vlaad")]
struct CausalBuffer {
    inner: inference::CausalBuffer,
}

#[pymethods]
impl CausalBuffer {
    #[new]
    #[pyo3(signature = (
        capacity = inference::DEFAULT_BUFFER_FRAMES,
        period = inference::DEFAULT_SUBSAMPLE_PERIOD,
        tick_rate = inference::DEFAULT_TICK_RATE_HZ,
    ))]
    fn new(capacity: usize, period: u64, tick_rate: f64) -> PyResult<Self> {
        Ok(Self {
            inner: inference::CausalBuffer::new(capacity, period, tick_rate).map_err(py_err)?,
        })
    }

    #[pyo3(signature = (frame, tick, encoder, checkpoint, caching = true))]
    fn push_tick(
        &mut self,
        frame: Vec<f64>,
        tick: u64,
        encoder: &StubEncoder,
        checkpoint: &Checkpoint,
        caching: bool,
    ) -> PyResult<f64> {
        self.inner
            .push_tick(&frame, tick, &encoder.inner, &checkpoint.inner, caching)
            .map_err(py_err)
    }

    #[getter]
    fn encoder_calls(&self) -> u64 {
        self.inner.encoder_calls()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pymodule]
fn vlaad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lse_pool, m)?)?;
    m.add_function(wrap_pyfunction!(pooling_attention, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(youden_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(infraction_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_signed_rank, m)?)?;
    m.add_function(wrap_pyfunction!(make_global_state, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<StubEncoder>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<CausalBuffer>()?;
    Ok(())
}
