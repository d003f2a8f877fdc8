//! Python bindings: `import clue`.
//!
//! Tensors cross the boundary as flat lists of floats plus explicit shapes,
//! so the module has no dependency on numpy.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use clue_core::aggregate::{self, infer_grid_side};
use clue_core::decoder::{DecoderConfig, TokenSequence};
use clue_core::dialog::{self, ModelOutput, Turn};
use clue_core::loc::{self, BoxNorm, LocQuad};
use clue_core::metrics::{self, ConfusionCounts};
use clue_core::probe::{self, AdamWConfig, LabeledMap, ProbeParams, TrainConfig};
use clue_core::tensor::{AttentionTensor, QueryRole, TokenMeta};
use clue_core::{cat1, synth};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn to_box(b: [f64; 4]) -> PyResult<BoxNorm> {
    BoxNorm::from_array(b).map_err(value_err)
}

fn parse_role(name: &str) -> PyResult<QueryRole> {
    [
        QueryRole::Content,
        QueryRole::Conditioning,
        QueryRole::Eos,
        QueryRole::Pad,
        QueryRole::Image,
    ]
    .into_iter()
    .find(|r| r.name() == name)
    .ok_or_else(|| PyValueError::new_err(format!("unknown query role {name:?}")))
}

/// Min-max normalised `G×G` ambiguity map.
#[pyclass(name = "AmbiguityMap", module = "clue", from_py_object)]
#[derive(Clone)]
pub struct PyAmbiguityMap {
    inner: aggregate::AmbiguityMap,
}

#[pymethods]
impl PyAmbiguityMap {
    #[new]
    fn new(grid_side: usize, values: Vec<f64>) -> PyResult<Self> {
        let inner = aggregate::AmbiguityMap::from_values(grid_side, values).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn grid_side(&self) -> usize {
        self.inner.grid_side
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    #[getter]
    fn source_layer(&self) -> Option<u32> {
        self.inner.source_layer
    }

    fn get(&self, row: usize, col: usize) -> PyResult<f64> {
        let g = self.inner.grid_side;
        if row >= g || col >= g {
            return Err(PyValueError::new_err(format!("cell ({row}, {col}) outside {g}×{g}")));
        }
        Ok(self.inner.get(row, col))
    }

    fn argmax(&self) -> (usize, usize) {
        self.inner.argmax()
    }

    fn render_ascii(&self) -> String {
        self.inner.render_ascii()
    }

    #[pyo3(signature = (min_separation = 4, min_height = 0.1))]
    fn peaks(&self, min_separation: usize, min_height: f64) -> Vec<(usize, usize)> {
        probe::localize_peaks(&self.inner, min_separation, min_height)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let file = File::create(path).map_err(io_err)?;
        clue_core::mapfile::write_map(&self.inner, BufWriter::new(file)).map_err(io_err)?;
        Ok(())
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let file = File::open(path).map_err(io_err)?;
        let inner = clue_core::mapfile::read_map(BufReader::new(file)).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!("AmbiguityMap(grid_side={})", self.inner.grid_side)
    }
}

fn build_tensor(
    values: Vec<f32>,
    shape: (usize, usize, usize),
    image_tokens: usize,
    roles: &[String],
) -> PyResult<(AttentionTensor, TokenMeta)> {
    let (h, q, k) = shape;
    let t = AttentionTensor::new(0, h, q, k, image_tokens, values).map_err(value_err)?;
    let roles = roles.iter().map(|r| parse_role(r)).collect::<PyResult<Vec<_>>>()?;
    Ok((t, TokenMeta::new(roles)))
}

/// Aggregates a flat `[heads][queries][keys]` attention tensor into a map.
#[pyfunction]
#[pyo3(signature = (values, shape, image_tokens, roles, grid_side = None, epsilon = aggregate::DEFAULT_EPSILON))]
fn extract_map(
    values: Vec<f32>,
    shape: (usize, usize, usize),
    image_tokens: usize,
    roles: Vec<String>,
    grid_side: Option<usize>,
    epsilon: f64,
) -> PyResult<PyAmbiguityMap> {
    let (t, meta) = build_tensor(values, shape, image_tokens, &roles)?;
    let g = match grid_side {
        Some(g) => g,
        None => infer_grid_side(image_tokens)
            .ok_or_else(|| PyValueError::new_err(format!("{image_tokens} image tokens are not a square")))?,
    };
    let (inner, _) = aggregate::extract_map(&t, &meta, g, epsilon).map_err(value_err)?;
    Ok(PyAmbiguityMap { inner })
}

/// Reads a CAT1 file into a dict with `shape`, `layer`, `image_tokens`,
/// `values` and `roles`.
#[pyfunction]
fn read_cat1(py: Python<'_>, path: &str) -> PyResult<Py<PyAny>> {
    let file = File::open(path).map_err(io_err)?;
    let (t, meta) = cat1::read_tensor(BufReader::new(file)).map_err(value_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("shape", (t.num_heads(), t.num_queries(), t.num_keys()))?;
    d.set_item("layer", t.layer_index())?;
    d.set_item("image_tokens", t.num_image_tokens())?;
    d.set_item("values", t.values().to_vec())?;
    d.set_item("roles", meta.query_roles.iter().map(|r| r.name()).collect::<Vec<_>>())?;
    d.set_item("strings", meta.text_strings.clone())?;
    Ok(d.into_any().unbind())
}

/// Writes a flat attention tensor as CAT1; returns the byte count.
#[pyfunction]
#[pyo3(signature = (path, values, shape, image_tokens, roles, layer = 0, strings = None))]
fn write_cat1(
    path: &str,
    values: Vec<f32>,
    shape: (usize, usize, usize),
    image_tokens: usize,
    roles: Vec<String>,
    layer: u32,
    strings: Option<Vec<String>>,
) -> PyResult<u64> {
    let (h, q, k) = shape;
    let t = AttentionTensor::new(layer, h, q, k, image_tokens, values).map_err(value_err)?;
    let roles = roles.iter().map(|r| parse_role(r)).collect::<PyResult<Vec<_>>>()?;
    let mut meta = TokenMeta::new(roles);
    if let Some(s) = strings {
        meta = meta.with_strings(s);
    }
    let file = File::create(path).map_err(io_err)?;
    cat1::write_tensor(&t, &meta, BufWriter::new(file)).map_err(value_err)
}

/// Validation messages for a flat tensor; empty when valid.
#[pyfunction]
#[pyo3(signature = (values, shape, image_tokens, softmax_rows = true))]
fn validate_tensor(
    values: Vec<f32>,
    shape: (usize, usize, usize),
    image_tokens: usize,
    softmax_rows: bool,
) -> PyResult<Vec<String>> {
    let (h, q, k) = shape;
    let t = AttentionTensor::new(0, h, q, k, image_tokens, values).map_err(value_err)?;
    let report = clue_core::tensor::validate_tensor(&t, softmax_rows);
    Ok(report.violations.iter().map(|v| v.to_string()).collect())
}

/// Seeded toy prefix-LM decoder.
#[pyclass(name = "ToyDecoder", module = "clue")]
pub struct PyToyDecoder {
    inner: clue_core::decoder::ToyDecoder,
}

impl PyToyDecoder {
    fn sequence(&self, prefix: &str, suffix: &str) -> TokenSequence {
        TokenSequence::from_text(
            self.inner.tokenizer(),
            self.inner.config().num_image_tokens,
            prefix,
            suffix,
        )
    }
}

#[pymethods]
impl PyToyDecoder {
    #[new]
    #[pyo3(signature = (num_layers = 4, num_heads = 4, num_kv_heads = 2, model_dim = 64, vocab_size = 256, grid_side = 8, seed = 0))]
    fn new(
        num_layers: usize,
        num_heads: usize,
        num_kv_heads: usize,
        model_dim: usize,
        vocab_size: usize,
        grid_side: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = DecoderConfig {
            num_layers,
            num_heads,
            num_kv_heads,
            model_dim,
            vocab_size,
            ..DecoderConfig::default()
        }
        .with_grid(grid_side)
        .with_seed(seed);
        let inner = clue_core::decoder::ToyDecoder::new(cfg).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn half_depth_layer(&self) -> usize {
        self.inner.config().half_depth_layer()
    }

    /// Raw attention of one block as a dict like [`read_cat1`] returns.
    #[pyo3(signature = (prefix, suffix = "", layer = None))]
    fn attention(&self, py: Python<'_>, prefix: &str, suffix: &str, layer: Option<usize>) -> PyResult<Py<PyAny>> {
        let seq = self.sequence(prefix, suffix);
        let layer = layer.unwrap_or_else(|| self.inner.config().half_depth_layer());
        let t = self.inner.forward_attention(&seq, layer).map_err(value_err)?;
        let meta = seq.token_meta(self.inner.tokenizer());
        let d = pyo3::types::PyDict::new(py);
        d.set_item("shape", (t.num_heads(), t.num_queries(), t.num_keys()))?;
        d.set_item("layer", layer)?;
        d.set_item("image_tokens", t.num_image_tokens())?;
        d.set_item("values", t.values().to_vec())?;
        d.set_item("roles", meta.query_roles.iter().map(|r| r.name()).collect::<Vec<_>>())?;
        Ok(d.into_any().unbind())
    }

    /// Attention of one block aggregated into a map.
    #[pyo3(signature = (prefix, layer = None, epsilon = aggregate::DEFAULT_EPSILON))]
    fn ambiguity_map(&self, prefix: &str, layer: Option<usize>, epsilon: f64) -> PyResult<PyAmbiguityMap> {
        let seq = self.sequence(prefix, "");
        let cfg = self.inner.config();
        let layer = layer.unwrap_or_else(|| cfg.half_depth_layer());
        let t = self.inner.forward_attention(&seq, layer).map_err(value_err)?;
        let meta = seq.token_meta(self.inner.tokenizer());
        let (inner, _) = aggregate::extract_map(&t, &meta, cfg.grid_side, epsilon).map_err(value_err)?;
        Ok(PyAmbiguityMap { inner })
    }

    /// Greedy continuation of `prefix`, decoded to text.
    #[pyo3(signature = (prefix, max_new_tokens = 12))]
    fn generate(&self, prefix: &str, max_new_tokens: usize) -> PyResult<String> {
        let seq = self.sequence(prefix, "");
        let ids = self.inner.greedy_generate(&seq, max_new_tokens).map_err(value_err)?;
        Ok(self.inner.tokenizer().decode(&ids))
    }
}

/// CNN probe with its training and inference entry points.
#[pyclass(name = "Probe", module = "clue")]
pub struct PyProbe {
    params: ProbeParams,
    history: Vec<f64>,
}

#[pymethods]
impl PyProbe {
    #[new]
    #[pyo3(signature = (grid_side, seed = 42))]
    fn new(grid_side: usize, seed: u64) -> PyResult<Self> {
        let params = probe::init_params(grid_side, seed).map_err(value_err)?;
        Ok(Self {
            params,
            history: Vec::new(),
        })
    }

    /// Trains a fresh probe; `val_fraction` of the data is held out.
    #[staticmethod]
    #[pyo3(signature = (maps, labels, epochs = 10, batch_size = 32, lr = 1e-4, weight_decay = 1e-4, seed = 42, val_fraction = 0.0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        maps: Vec<PyAmbiguityMap>,
        labels: Vec<u8>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        weight_decay: f64,
        seed: u64,
        val_fraction: f64,
    ) -> PyResult<Self> {
        if maps.len() != labels.len() {
            return Err(PyValueError::new_err(format!(
                "{} maps but {} labels",
                maps.len(),
                labels.len()
            )));
        }
        let data = maps
            .into_iter()
            .zip(labels)
            .map(|(m, y)| LabeledMap::new(m.inner, y).map_err(value_err))
            .collect::<PyResult<Vec<_>>>()?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            optimizer: AdamWConfig {
                lr,
                weight_decay,
                ..AdamWConfig::default()
            },
            seed,
            validation_fraction: val_fraction,
            threshold: probe::DEFAULT_THRESHOLD,
        };
        let (params, history) = py.detach(|| probe::train(&data, &cfg)).map_err(value_err)?;
        Ok(Self {
            params,
            history: history.epochs.iter().map(|e| e.train_loss).collect(),
        })
    }

    #[getter]
    fn grid_side(&self) -> usize {
        self.params.grid_side
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Mean training loss per epoch of the last [`train`](Self::train).
    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.history.clone()
    }

    fn probability(&self, map: &PyAmbiguityMap) -> PyResult<f64> {
        probe::forward(&self.params, &map.inner).map_err(value_err)
    }

    /// `(p_amb, ambiguous)`.
    #[pyo3(signature = (map, threshold = probe::DEFAULT_THRESHOLD))]
    fn predict(&self, map: &PyAmbiguityMap, threshold: f64) -> PyResult<(f64, bool)> {
        let p = probe::predict(&self.params, &map.inner, threshold).map_err(value_err)?;
        Ok((p.probability, p.ambiguous))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let file = File::create(path).map_err(io_err)?;
        probe::write_params(&self.params, BufWriter::new(file)).map_err(io_err)?;
        Ok(())
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let file = File::open(path).map_err(io_err)?;
        let params = probe::read_params(BufReader::new(file)).map_err(value_err)?;
        Ok(Self {
            params,
            history: Vec::new(),
        })
    }
}

/// `n` synthetic maps with alternating labels: `[(map, label), ...]`.
#[pyfunction]
#[pyo3(signature = (n, grid_side = 32, seed = 42))]
fn gen_map_dataset(n: usize, grid_side: usize, seed: u64) -> PyResult<Vec<(PyAmbiguityMap, u8)>> {
    let data = synth::gen_map_dataset(n, grid_side, seed).map_err(value_err)?;
    Ok(data
        .into_iter()
        .map(|s| (PyAmbiguityMap { inner: s.map }, s.label))
        .collect())
}

#[pyfunction]
fn quantize(c: f64) -> PyResult<u16> {
    loc::quantize(c).map_err(value_err)
}

#[pyfunction]
fn encode_box(b: [f64; 4]) -> PyResult<String> {
    loc::encode_box(&to_box(b)?).map_err(value_err)
}

/// Decoded box of the first valid location sequence in `text`, if any.
#[pyfunction]
fn decode_box(text: &str) -> Option<[f64; 4]> {
    loc::parse_loc_sequence(text).map(|q| loc::decode_box(q).to_array())
}

#[pyfunction]
fn parse_loc_sequence(text: &str) -> Option<[u16; 4]> {
    loc::parse_loc_sequence(text).map(|q: LocQuad| q.bins())
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(metrics::iou(&to_box(a)?, &to_box(b)?))
}

/// `{"accuracy", "precision", "recall", "f1", "zero_division"}`.
#[pyfunction]
fn classification_metrics(py: Python<'_>, tp: u64, fp: u64, tn: u64, fn_: u64) -> PyResult<Py<PyAny>> {
    let r = metrics::classification_metrics(&ConfusionCounts::new(tp, fp, tn, fn_)).map_err(value_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("f1", r.f1)?;
    d.set_item("zero_division", r.zero_division.any())?;
    Ok(d.into_any().unbind())
}

fn turns_of(turns: Vec<(String, String)>) -> Vec<Turn> {
    turns.into_iter().map(|(q, a)| Turn::new(q, a)).collect()
}

/// Model input for a request and its turns so far.
#[pyfunction]
#[pyo3(signature = (user_request, turns = Vec::new()))]
fn build_prefix(user_request: &str, turns: Vec<(String, String)>) -> String {
    format!(
        "{}{}",
        dialog::PREFIX_HEADER,
        dialog::history_text(user_request, &turns_of(turns))
    )
}

/// `[(prefix, target, is_grounding), ...]`, prefixes without the header.
#[pyfunction]
fn linearize_dialog(
    user_request: &str,
    turns: Vec<(String, String)>,
    gold_box: [f64; 4],
) -> PyResult<Vec<(String, String, bool)>> {
    let pairs = dialog::linearize_dialog(user_request, &turns_of(turns), &to_box(gold_box)?).map_err(value_err)?;
    Ok(pairs
        .into_iter()
        .map(|p| (p.prefix, p.target, p.is_grounding))
        .collect())
}

/// `("grounding", [y0, x0, y1, x1] bins)` or `("question", text)`.
#[pyfunction]
fn classify_output(py: Python<'_>, generated: &str) -> PyResult<(String, Py<PyAny>)> {
    Ok(match dialog::classify_output(generated).map_err(value_err)? {
        ModelOutput::Grounding(q) => ("grounding".into(), q.bins().into_pyobject(py)?.into_any().unbind()),
        ModelOutput::Question(s) => ("question".into(), s.into_pyobject(py)?.into_any().unbind()),
    })
}

/// Suffix-only cross-entropy over flat `T×V` logits.
#[pyfunction]
fn masked_ce(logits: Vec<f64>, vocab_size: usize, target_ids: Vec<u32>, suffix_start: usize) -> PyResult<f64> {
    dialog::masked_ce(&logits, vocab_size, &target_ids, suffix_start).map_err(value_err)
}

#[pymodule]
pub fn clue(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyAmbiguityMap>()?;
    m.add_class::<PyToyDecoder>()?;
    m.add_class::<PyProbe>()?;
    m.add_function(wrap_pyfunction!(extract_map, m)?)?;
    m.add_function(wrap_pyfunction!(read_cat1, m)?)?;
    m.add_function(wrap_pyfunction!(write_cat1, m)?)?;
    m.add_function(wrap_pyfunction!(validate_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(gen_map_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(encode_box, m)?)?;
    m.add_function(wrap_pyfunction!(decode_box, m)?)?;
    m.add_function(wrap_pyfunction!(parse_loc_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(build_prefix, m)?)?;
    m.add_function(wrap_pyfunction!(linearize_dialog, m)?)?;
    m.add_function(wrap_pyfunction!(classify_output, m)?)?;
    m.add_function(wrap_pyfunction!(masked_ce, m)?)?;
    Ok(())
}
