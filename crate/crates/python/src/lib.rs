//! Python bindings: `import pylightcam`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use lightcam::audio::{compute_fbank, read_wav, Waveform, SAMPLE_RATE};
use lightcam::eval::{self, AamConfig, DcfParams, TrialScores};
use lightcam::profile::{count_flops, ProfileReport, FRAMES_PER_SECOND};
use lightcam::{init_weights, load_weights, save_weights, LightCam, ModelConfig, Tensor, WeightStore};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Embedding extractor with its weights.
#[pyclass(module = "pylightcam")]
struct Model {
    store: WeightStore,
    model: LightCam,
}

#[pymethods]
impl Model {
    /// Randomly initialized reference model (or the small test variant).
    #[staticmethod]
    #[pyo3(signature = (seed, tiny = false))]
    fn init(seed: u64, tiny: bool) -> PyResult<Self> {
        let cfg = if tiny { ModelConfig::tiny() } else { ModelConfig::default() };
        let store = init_weights(&cfg, seed);
        let model = LightCam::from_store(&store, tiny).map_err(value_err)?;
        Ok(Model { store, model })
    }

    #[staticmethod]
    #[pyo3(signature = (path, allow_override = false))]
    fn load(path: &str, allow_override: bool) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(value_err)?;
        let store = load_weights(&bytes).map_err(value_err)?;
        let model = LightCam::from_store(&store, allow_override).map_err(value_err)?;
        Ok(Model { store, model })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        std::fs::write(path, save_weights(&self.store)).map_err(value_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &save_weights(&self.store))
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.model.config().embedding_dim
    }

    /// Embedding of a 16 kHz mono 16-bit WAV file given as bytes.
    fn embed_wav(&self, wav: &[u8]) -> PyResult<Vec<f32>> {
        let w = read_wav(wav).map_err(value_err)?;
        self.model.embed_waveform(&w).map_err(value_err)
    }

    /// Embedding of raw samples in [-1, 1] at 16 kHz.
    fn embed_samples(&self, samples: Vec<f32>) -> PyResult<Vec<f32>> {
        let w = Waveform::new(samples, SAMPLE_RATE).map_err(value_err)?;
        self.model.embed_waveform(&w).map_err(value_err)
    }

    /// `(params, flops)` for `frames` input frames.
    #[pyo3(signature = (frames = FRAMES_PER_SECOND))]
    fn profile(&self, frames: usize) -> (u64, u64) {
        let r = ProfileReport::new(self.model.config(), frames);
        (r.total_params, r.total_flops)
    }
}

/// Mean-normalized log-mel features, one list of 80 values per frame.
#[pyfunction]
fn fbank(wav: &[u8]) -> PyResult<Vec<Vec<f32>>> {
    let f = compute_fbank(&read_wav(wav).map_err(value_err)?).map_err(value_err)?;
    Ok(f.frames.data().chunks(80).map(<[f32]>::to_vec).collect())
}

#[pyfunction]
fn cosine_score(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    eval::cosine_score(&a, &b).map_err(value_err)
}

/// `(eer, threshold)`.
#[pyfunction]
fn compute_eer(target: Vec<f64>, nontarget: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = eval::compute_eer(&TrialScores::new(target, nontarget)).map_err(value_err)?;
    Ok((r.eer, r.threshold))
}

/// `(min_dcf, threshold)`, normalized.
#[pyfunction]
#[pyo3(signature = (target, nontarget, p_target = 0.01, c_miss = 1.0, c_fa = 1.0))]
fn compute_min_dcf(target: Vec<f64>, nontarget: Vec<f64>, p_target: f64, c_miss: f64, c_fa: f64) -> PyResult<(f64, f64)> {
    let p = DcfParams { p_target, c_miss, c_fa };
    let r = eval::compute_min_dcf(&TrialScores::new(target, nontarget), &p).map_err(value_err)?;
    Ok((r.min_dcf, r.threshold))
}

#[pyfunction]
#[pyo3(signature = (embedding, label, class_weights, margin = 0.2, scale = 32.0))]
fn aam_softmax_loss(embedding: Vec<f32>, label: usize, class_weights: Vec<Vec<f32>>, margin: f64, scale: f64) -> PyResult<f64> {
    let dim = class_weights.first().map_or(0, Vec::len);
    if class_weights.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("class weight rows must have equal length"));
    }
    let n = class_weights.len();
    let w = Tensor::new(vec![n, dim], class_weights.concat()).map_err(value_err)?;
    eval::aam_softmax_loss(&embedding, label, &AamConfig { margin, scale, class_weights: w }).map_err(value_err)
}

/// `(params, flops)` of the reference architecture.
#[pyfunction]
#[pyo3(signature = (frames = FRAMES_PER_SECOND))]
fn reference_complexity(frames: usize) -> (u64, u64) {
    let cfg = ModelConfig::default();
    (ProfileReport::new(&cfg, frames).total_params, count_flops(&cfg, frames))
}

#[pymodule]
fn pylightcam(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(fbank, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_score, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(compute_min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(aam_softmax_loss, m)?)?;
    m.add_function(wrap_pyfunction!(reference_complexity, m)?)?;
    Ok(())
}
