//! Python bindings: embedding stores, pairing, training, checkpoints,
//! evaluation statistics and the end-to-end pipeline.

use std::path::PathBuf;

use clipit_core::data as cd;
use clipit_core::eval as ce;
use clipit_core::model::{checkpoint, count_cost, ClipItModel};
use clipit_core::numeric::Matrix;
use clipit_core::pairing::{self, PairingMode, PairingRequest};
use clipit_core::pipeline::{run_pipeline, PipelineConfig, PipelineInputs, DROPOUT_SEED_OFFSET};
use clipit_core::synth::{generate, SynthConfig, SynthDataset};
use clipit_core::text;
use clipit_core::train::{train_variant, TrainConfig, TrainingSet, Variant};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(clipit, ClipitError, PyValueError, "Raised for any error reported by the core library.");

fn err(e: clipit_core::Error) -> PyErr {
    ClipitError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Row-major embeddings with optional integer labels and string ids.
#[pyclass(module = "clipit", skip_from_py_object)]
#[derive(Clone)]
struct EmbeddingStore {
    inner: cd::EmbeddingStore,
}

#[pymethods]
impl EmbeddingStore {
    #[new]
    #[pyo3(signature = (vectors, labels=None, ids=None))]
    fn new(vectors: Vec<Vec<f64>>, labels: Option<Vec<u32>>, ids: Option<Vec<String>>) -> PyResult<Self> {
        let inner = cd::EmbeddingStore::new(matrix(vectors)?, labels, ids).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cd::EmbeddingStore::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn vectors(&self) -> Vec<Vec<f64>> {
        rows(self.inner.vectors())
    }

    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels().map(<[u32]>::to_vec)
    }

    fn ids(&self) -> Option<Vec<String>> {
        self.inner.ids().map(<[String]>::to_vec)
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingStore(len={}, dim={})", self.inner.len(), self.inner.dim())
    }
}

/// One report chosen per image.
#[pyclass(module = "clipit", skip_from_py_object)]
#[derive(Clone)]
struct PairedDataset {
    inner: cd::PseudoPairedDataset,
}

#[pymethods]
impl PairedDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cd::PseudoPairedDataset::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(image_index, text_id, label, similarity)` per image.
    fn records(&self) -> Vec<(usize, String, Option<u32>, f64)> {
        self.inner
            .records()
            .iter()
            .map(|r| (r.image_index, r.text_id.clone(), r.label, r.similarity))
            .collect()
    }

    fn similarities(&self) -> Vec<f64> {
        self.inner.similarities()
    }
}

/// A trained model; after `unimodal()` it needs images only.
#[pyclass(module = "clipit", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: ClipItModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, path).map_err(err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    #[getter]
    fn has_text_branch(&self) -> bool {
        self.inner.text_adapter().is_some()
    }

    fn unimodal(&self) -> Self {
        Self {
            inner: self.inner.clone().into_unimodal(),
        }
    }

    /// Classes and logits from image embeddings alone.
    fn predict(&self, images: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, Vec<Vec<f64>>)> {
        let (classes, logits) = self.inner.predict_unimodal(&matrix(images)?).map_err(err)?;
        Ok((classes, rows(&logits)))
    }

    /// Fused logits and `(t, t̂)` for paired image and text rows.
    fn forward_joint<'py>(
        &self,
        py: Python<'py>,
        images: Vec<Vec<f64>>,
        texts: Vec<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let out = self.inner.forward_joint(&matrix(images)?, &matrix(texts)?).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("logits", rows(&out.logits))?;
        d.set_item("t", out.t.as_ref().map(rows))?;
        d.set_item("t_hat", out.t_hat.as_ref().map(rows))?;
        Ok(d)
    }

    fn text_logits(&self, texts: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.text_logits(&matrix(texts)?).map_err(err)?))
    }

    fn cost<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = count_cost(&self.inner);
        let d = PyDict::new(py);
        d.set_item("param_total", c.param_total)?;
        d.set_item("param_trainable", c.param_trainable)?;
        d.set_item("flops_per_sample", c.flops_per_sample)?;
        d.set_item("text_param_total", c.text_param_total)?;
        d.set_item("text_param_trainable", c.text_param_trainable)?;
        d.set_item("text_flops_per_sample", c.text_flops_per_sample)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let d = self.inner.dims();
        format!("Model(kind={}, d_v={}, d_t={}, classes={})", self.inner.kind(), d.d_v, d.d_t, d.classes)
    }
}

/// Writes the synthetic benchmark to `out_dir` and returns the file paths.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, samples=4000, test_samples=1000, classes=2, ambiguous=0.3, reports=40))]
fn synth(
    out_dir: PathBuf,
    seed: u64,
    samples: usize,
    test_samples: usize,
    classes: usize,
    ambiguous: f64,
    reports: usize,
) -> PyResult<Vec<PathBuf>> {
    let cfg = SynthConfig {
        seed,
        samples,
        test_samples,
        classes,
        ambiguous_fraction: ambiguous,
        reports,
        ..SynthConfig::default()
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| ClipitError::new_err(format!("{}: {e}", out_dir.display())))?;
    generate(&cfg).and_then(|ds| ds.save(&out_dir)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (text, dim=64, hash_seed=0))]
fn encode_text(text: &str, dim: usize, hash_seed: u64) -> PyResult<Vec<f64>> {
    let cfg = text::HashedEncoderConfig::new(dim, hash_seed).map_err(err)?;
    text::encode_text(text, &cfg).map_err(err)
}

/// Encodes a JSONL report corpus. `seed` matches the training seed used
/// by the pipeline for word dropout.
#[pyfunction]
#[pyo3(signature = (corpus_path, dim=64, hash_seed=0, dropout=0.0, seed=0))]
fn encode_corpus(corpus_path: PathBuf, dim: usize, hash_seed: u64, dropout: f64, seed: u64) -> PyResult<EmbeddingStore> {
    let corpus = cd::TextCorpus::load(corpus_path).map_err(err)?;
    let cfg = text::HashedEncoderConfig::new(dim, hash_seed).map_err(err)?;
    let inner = text::encode_corpus(&corpus, &cfg, dropout, seed.wrapping_add(DROPOUT_SEED_OFFSET)).map_err(err)?;
    Ok(EmbeddingStore { inner })
}

/// Matches each image with its `rank`-th most similar report, or a
/// uniformly random one when `random_seed` is given.
#[pyfunction]
#[pyo3(signature = (images, texts, rank=1, random_seed=None, workers=1))]
fn pair(
    images: &EmbeddingStore,
    texts: &EmbeddingStore,
    rank: usize,
    random_seed: Option<u64>,
    workers: usize,
) -> PyResult<PairedDataset> {
    let req = PairingRequest::new(&images.inner, &texts.inner).with_workers(workers);
    let mode = match random_seed {
        Some(seed) => PairingMode::Random { seed },
        None => PairingMode::Rank(rank),
    };
    Ok(PairedDataset {
        inner: pairing::pair(&req, mode).map_err(err)?,
    })
}

fn train_config(seed: u64, variant: &str, epochs: Option<usize>, lambda: f64, freeze_text: bool) -> PyResult<TrainConfig> {
    let cfg = TrainConfig {
        seed,
        variant: variant.parse::<Variant>().map_err(err)?,
        epochs,
        lambda,
        freeze_text,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Trains on paired data. Returns the full model and per-stage logs as
/// `{stage: [(epoch, ce_loss, kd_loss, train_acc), ...]}`.
#[pyfunction]
#[pyo3(signature = (images, pairs, texts, seed=0, variant="standard", epochs=None, lambda_=1.0, freeze_text=false))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    images: &EmbeddingStore,
    pairs: &PairedDataset,
    texts: &EmbeddingStore,
    seed: u64,
    variant: &str,
    epochs: Option<usize>,
    lambda_: f64,
    freeze_text: bool,
) -> PyResult<(Model, Bound<'py, PyDict>)> {
    let cfg = train_config(seed, variant, epochs, lambda_, freeze_text)?;
    let set = TrainingSet::from_text_store(&images.inner, &pairs.inner, &texts.inner).map_err(err)?;
    let out = py.detach(|| train_variant(&set, &cfg)).map_err(err)?;
    let logs = PyDict::new(py);
    for log in &out.logs {
        let recs: Vec<(usize, f64, f64, f64)> =
            log.epochs.iter().map(|e| (e.epoch, e.ce_loss, e.kd_loss, e.train_acc)).collect();
        logs.set_item(&log.stage, recs)?;
    }
    Ok((Model { inner: out.model }, logs))
}

/// Runs pairing, encoding, training and evaluation on a benchmark
/// directory written by `synth`. Artifacts go to `out_dir` when given.
#[pyfunction]
#[pyo3(signature = (
    data_dir, out_dir=None, seed=0, variant="standard", epochs=None, lambda_=1.0,
    dropout=0.0, rank=1, random_pairing=false, baseline=false, freeze_text=false
))]
#[allow(clippy::too_many_arguments)]
fn pipeline<'py>(
    py: Python<'py>,
    data_dir: PathBuf,
    out_dir: Option<PathBuf>,
    seed: u64,
    variant: &str,
    epochs: Option<usize>,
    lambda_: f64,
    dropout: f64,
    rank: usize,
    random_pairing: bool,
    baseline: bool,
    freeze_text: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = PipelineConfig {
        train: train_config(seed, variant, epochs, lambda_, freeze_text)?,
        baseline,
        ..PipelineConfig::default()
    };
    cfg.text.dropout = dropout;
    cfg.pairing.rank = rank;
    cfg.pairing.random = random_pairing;
    let ds = SynthDataset::load(&data_dir).map_err(err)?;
    let inputs = PipelineInputs {
        train_retrieval: &ds.train.retrieval,
        train_task: &ds.train.task,
        test_retrieval: Some(&ds.test.retrieval),
        test_task: &ds.test.task,
        report_retrieval: &ds.report_retrieval,
        corpus: &ds.corpus,
    };
    let out = py.detach(|| run_pipeline(&inputs, &cfg)).map_err(err)?;
    if let Some(dir) = &out_dir {
        out.save(dir, &cfg).map_err(err)?;
    }
    let d = PyDict::new(py);
    d.set_item("accuracy", out.accuracy)?;
    d.set_item("baseline_accuracy", out.baseline_accuracy)?;
    d.set_item("fidelity", out.fidelity)?;
    d.set_item("omega_count", out.omega.map(|o| o.count))?;
    d.set_item("omega_fraction", out.omega.map(|o| o.fraction))?;
    d.set_item("predictions", out.predictions.iter().map(|p| p.class).collect::<Vec<_>>())?;
    d.set_item("model", Model { inner: out.model })?;
    Ok(d)
}

/// `(count, fraction)` of samples the text branch gets right and the
/// vision branch gets wrong.
#[pyfunction]
fn omega(labels: Vec<usize>, vision: Vec<usize>, text: Vec<usize>) -> PyResult<(usize, f64)> {
    let classes = labels.iter().chain(&vision).chain(&text).max().map_or(2, |m| m + 1);
    let set = ce::PredictionSet::new(labels, vision, Some(text), None, classes).map_err(err)?;
    let o = ce::omega(&set).map_err(err)?;
    Ok((o.count, o.fraction))
}

/// `(statistic, dof, p_value)` of Fisher's combined probability test.
#[pyfunction]
fn fisher_combined(p_values: Vec<f64>) -> PyResult<(f64, usize, f64)> {
    let f = ce::fisher_combined(&p_values).map_err(err)?;
    Ok((f.statistic, f.dof, f.p_value))
}

#[pymodule]
pub fn clipit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ClipitError", m.py().get_type::<ClipitError>())?;
    m.add_class::<EmbeddingStore>()?;
    m.add_class::<PairedDataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(encode_text, m)?)?;
    m.add_function(wrap_pyfunction!(encode_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(pair, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(omega, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_combined, m)?)?;
    Ok(())
}
