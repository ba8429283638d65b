//! Python bindings: data synthesis, sequence layout, training, evaluation and
//! stream replay. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use streamdial::data::{self, DataConfig, Role, Source, StreamSample};
use streamdial::eval::{evaluate_thetas, train_tokens as count_tokens};
use streamdial::infer::{run_stream as replay, InferenceConfig, SkipPolicy};
use streamdial::model::{self, Checkpoint, ModelConfig, ModelParams, StreamItem};
use streamdial::train::{assemble as lay_out, compute_masks, prepare, Scheme, TrainConfig, Trainer};

fn err(e: streamdial::Error) -> PyErr {
    match e.root() {
        streamdial::Error::Config(_)
        | streamdial::Error::Parse { .. }
        | streamdial::Error::SchemaVersion { .. }
        | streamdial::Error::UnknownToken(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn scheme(name: &str) -> PyResult<Scheme> {
    name.parse().map_err(err)
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, json_to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

/// Token table: six control ids followed by the word list.
#[pyclass(name = "Vocabulary", module = "streamdial_py", from_py_object)]
#[derive(Clone)]
struct PyVocabulary(model::Vocabulary);

#[pymethods]
impl PyVocabulary {
    #[new]
    #[pyo3(signature = (shared_stream_eos = false))]
    fn new(shared_stream_eos: bool) -> Self {
        Self(data::grammar::vocabulary(shared_stream_eos))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<u32>> {
        self.0.encode(text).map_err(err)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        self.0.decode(&ids)
    }

    fn id(&self, word: &str) -> PyResult<u32> {
        self.0.id(word).map_err(err)
    }

    #[getter]
    fn stream_eos(&self) -> u32 {
        self.0.stream_eos()
    }

    #[getter]
    fn words(&self) -> Vec<String> {
        self.0.words().to_vec()
    }
}

/// One annotated stream.
#[pyclass(name = "Sample", module = "streamdial_py", from_py_object)]
#[derive(Clone)]
struct PySample(StreamSample);

#[pymethods]
impl PySample {
    #[staticmethod]
    fn from_json(line: &str) -> PyResult<Self> {
        let s: StreamSample = serde_json::from_str(line).map_err(|e| PyValueError::new_err(e.to_string()))?;
        s.validate().map_err(err)?;
        Ok(Self(s))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.0.fps
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.0.num_frames
    }

    /// `(role, frame, text)` per turn.
    #[getter]
    fn turns(&self) -> Vec<(String, usize, String)> {
        self.0
            .turns
            .iter()
            .map(|t| {
                let role = if t.kind == Role::User { "user" } else { "assistant" };
                (role.to_string(), t.frame, t.text.clone())
            })
            .collect()
    }

    /// Rendered feature vector per frame.
    fn features(&self) -> PyResult<Vec<Vec<f32>>> {
        self.0.frame_features().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, num_frames={}, turns={})", self.0.id, self.0.num_frames, self.0.turns.len())
    }
}

#[pyfunction]
#[pyo3(signature = (num_samples = 200, seed = 0, source = "narration", num_frames = 600))]
fn generate_dataset(num_samples: usize, seed: u64, source: &str, num_frames: usize) -> PyResult<Vec<PySample>> {
    let source = match source {
        "narration" => Source::Narration,
        "dialogue" => Source::Dialogue,
        other => return Err(PyValueError::new_err(format!("unknown source `{other}` (narration, dialogue)"))),
    };
    let mut cfg = DataConfig { num_samples, source, ..Default::default() };
    cfg.world.num_frames = num_frames;
    Ok(data::generate_dataset(&cfg, seed).map_err(err)?.into_iter().map(PySample).collect())
}

#[pyfunction]
fn read_jsonl(path: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(data::read_jsonl(&path).map_err(err)?.into_iter().map(PySample).collect())
}

#[pyfunction]
fn write_jsonl(samples: Vec<PySample>, path: PathBuf) -> PyResult<()> {
    let samples: Vec<StreamSample> = samples.into_iter().map(|s| s.0).collect();
    data::write_jsonl(&samples, &path).map_err(err)
}

/// Token layout of a sample under a scheme, with its loss masks. Frame slots
/// appear as the frame id.
#[pyfunction]
#[pyo3(signature = (sample, vocab, scheme = "streaming", tokens_per_frame = 1))]
fn assemble<'py>(
    py: Python<'py>,
    sample: &PySample,
    vocab: &PyVocabulary,
    scheme: &str,
    tokens_per_frame: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let seq = lay_out(&sample.0, &vocab.0, tokens_per_frame, self::scheme(scheme)?, usize::MAX).map_err(err)?;
    let masks = compute_masks(&seq);
    let d = PyDict::new(py);
    d.set_item("tokens", &seq.tokens)?;
    d.set_item("frame_last", &seq.frame_last)?;
    d.set_item("response", &seq.response)?;
    d.set_item("l", &masks.l)?;
    d.set_item("f", &masks.f)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (samples, vocab, scheme = "streaming", tokens_per_frame = 1))]
fn train_tokens(samples: Vec<PySample>, vocab: &PyVocabulary, scheme: &str, tokens_per_frame: usize) -> PyResult<usize> {
    let samples: Vec<StreamSample> = samples.into_iter().map(|s| s.0).collect();
    count_tokens(&samples, &vocab.0, tokens_per_frame, self::scheme(scheme)?).map_err(err)
}

/// A causal transformer over text tokens and frame slots (32-bit weights).
#[pyclass(name = "Model", module = "streamdial_py")]
struct PyModel(ModelParams<f32>);

/// A token id or a frame feature vector.
#[derive(FromPyObject)]
enum Item {
    Token(u32),
    Frame(Vec<f32>),
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        vocab_size, d_model = 128, n_layers = 2, n_heads = 4, max_context = 2048,
        tokens_per_frame = 1, frame_feature_dim = 16, projector_hidden = 128, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_context: usize,
        tokens_per_frame: usize,
        frame_feature_dim: usize,
        projector_hidden: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            max_context,
            tokens_per_frame,
            frame_feature_dim,
            projector_hidden,
        };
        Ok(Self(ModelParams::init(&cfg, seed).map_err(err)?))
    }

    /// Loads a checkpoint; returns the model, its vocabulary and metadata.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, PyVocabulary, std::collections::BTreeMap<String, String>)> {
        let ck: Checkpoint<f32> = model::load_checkpoint(&path).map_err(err)?;
        Ok((Self(ck.params), PyVocabulary(ck.vocab), ck.meta))
    }

    #[pyo3(signature = (path, vocab, scheme = None))]
    fn save(&self, path: PathBuf, vocab: &PyVocabulary, scheme: Option<&str>) -> PyResult<()> {
        let mut meta = std::collections::BTreeMap::new();
        if let Some(s) = scheme {
            meta.insert("scheme".to_string(), self::scheme(s)?.name().to_string());
        }
        let ck = Checkpoint { params: self.0.clone(), vocab: vocab.0.clone(), meta };
        model::save_checkpoint(&path, &ck).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.0.config())
    }

    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    /// Logits for every position of a mixed sequence of token ids and frame
    /// feature lists.
    fn logits(&self, items: Vec<Item>) -> PyResult<Vec<Vec<f32>>> {
        let items: Vec<StreamItem<'_>> = items
            .iter()
            .map(|i| match i {
                Item::Token(t) => StreamItem::Token(*t),
                Item::Frame(f) => StreamItem::Frame(f),
            })
            .collect();
        let out = self.0.forward_full(&items).map_err(err)?;
        Ok(out.data().chunks(self.0.config().vocab_size).map(<[f32]>::to_vec).collect())
    }

    /// Trains in place; returns the mean loss of each epoch.
    #[pyo3(signature = (samples, vocab, scheme = "streaming", epochs = 2, learning_rate = 1e-3, seed = 0, stream_loss_weight = 1.0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        samples: Vec<PySample>,
        vocab: &PyVocabulary,
        scheme: &str,
        epochs: usize,
        learning_rate: f64,
        seed: u64,
        stream_loss_weight: f64,
    ) -> PyResult<Vec<f64>> {
        let scheme = self::scheme(scheme)?;
        let samples: Vec<StreamSample> = samples.into_iter().map(|s| s.0).collect();
        let cfg = self.0.config().clone();
        let params = self.0.clone();
        let (params, means) = py
            .detach(|| -> streamdial::Result<_> {
                let examples = prepare(&samples, &vocab.0, cfg.tokens_per_frame, cfg.max_context, scheme)?;
                let tc = TrainConfig { scheme, epochs, learning_rate, seed, stream_loss_weight, ..Default::default() };
                let mut trainer = Trainer::new(tc, params, vocab.0.stream_eos())?;
                let means = trainer.run(&examples, &mut |_| {})?;
                Ok((trainer.params, means))
            })
            .map_err(err)?;
        self.0 = params;
        Ok(means)
    }

    /// One metrics dict per threshold.
    #[pyo3(signature = (samples, vocab, scheme = "streaming", thetas = vec![0.6]))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        samples: Vec<PySample>,
        vocab: &PyVocabulary,
        scheme: &str,
        thetas: Vec<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let scheme = self::scheme(scheme)?;
        let samples: Vec<StreamSample> = samples.into_iter().map(|s| s.0).collect();
        let reports = py.detach(|| evaluate_thetas(&self.0, &vocab.0, &samples, scheme, &thetas)).map_err(err)?.0;
        to_py(py, &reports)
    }

    /// Replays a stream on the simulated clock; returns `{summary, records}`.
    #[pyo3(signature = (
        sample, vocab, scheme = "streaming", theta = 0.6, fps = None, decode_ms = 30.0,
        encode_ms = 5.0, queue_capacity = 8, block = false, max_response_tokens = 16
    ))]
    #[allow(clippy::too_many_arguments)]
    fn stream<'py>(
        &self,
        py: Python<'py>,
        sample: &PySample,
        vocab: &PyVocabulary,
        scheme: &str,
        theta: f64,
        fps: Option<f64>,
        decode_ms: f64,
        encode_ms: f64,
        queue_capacity: usize,
        block: bool,
        max_response_tokens: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = InferenceConfig {
            theta,
            fps,
            decode_ms_per_token: decode_ms,
            encode_ms_per_frame: encode_ms,
            queue_capacity,
            skip_policy: if block { SkipPolicy::Block } else { SkipPolicy::DropOldest },
            max_response_tokens,
        };
        cfg.validate().map_err(err)?;
        let scheme = self::scheme(scheme)?;
        let t = py.detach(|| replay(&self.0, &vocab.0, &sample.0, scheme, &cfg)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("summary", to_py(py, &t.summary)?)?;
        d.set_item("records", to_py(py, &t.records)?)?;
        Ok(d.into_any())
    }
}

#[pymodule]
fn streamdial_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(write_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(train_tokens, m)?)?;
    Ok(())
}
