//! Python bindings: corpora, models, training and the analysis helpers.

use std::path::PathBuf;

use groundspeech::audio::{compute_mfcc, FeatureSequence, MfccConfig, Waveform};
use groundspeech::cli::RunConfig;
use groundspeech::experiments::{self, make_synthetic_corpus};
use groundspeech::lexicon::{self, NeighbourMode, PhoneSeq};
use groundspeech::model;
use groundspeech::trainer;
use groundspeech::vq;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: groundspeech::Error) -> PyErr {
    match e {
        groundspeech::Error::Io(_) | groundspeech::Error::MissingInput(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Run configuration from a TOML string (empty for defaults), with an
/// optional seed override, seeds expanded.
fn run_config(toml_text: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg: RunConfig = match toml_text {
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.expand_seeds();
    Ok(cfg)
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<FeatureSequence> {
    FeatureSequence::from_rows("py", &rows).map_err(py_err)
}

#[pyclass(name = "Corpus", module = "pygroundspeech")]
struct PyCorpus {
    inner: experiments::Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Synthetic corpus from the `[synth]` table of `config`.
    #[staticmethod]
    #[pyo3(signature = (config=None, seed=None))]
    fn synthetic(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = run_config(config, seed)?;
        let (inner, _) = make_synthetic_corpus(&cfg.synth).map_err(py_err)?;
        Ok(PyCorpus { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: experiments::Corpus::load(&dir).map_err(py_err)?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write(&dir).map_err(py_err)
    }

    #[getter]
    fn n_train_captions(&self) -> usize {
        self.inner.train.captions.len()
    }

    #[getter]
    fn n_test_images(&self) -> usize {
        self.inner.test.images.len()
    }

    #[getter]
    fn target_words(&self) -> Vec<String> {
        self.inner.targets.iter().map(|t| t.word.clone()).collect()
    }

    fn test_caption(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let c = self.inner.test.captions.get(i).ok_or_else(|| PyValueError::new_err("caption index out of range"))?;
        Ok((0..c.n_frames()).map(|t| c.frame(t).to_vec()).collect())
    }

    fn test_image(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner.test.images.get(i).cloned().ok_or_else(|| PyValueError::new_err("image index out of range"))
    }
}

#[pyclass(name = "Model", module = "pygroundspeech")]
struct PyModel {
    inner: model::GroundingModel,
}

#[pymethods]
impl PyModel {
    /// Fresh weights from the `[model]` table of `config`.
    #[staticmethod]
    #[pyo3(signature = (config=None, seed=None))]
    fn init(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = run_config(config, seed)?;
        Ok(PyModel {
            inner: model::GroundingModel::init(cfg.model).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: model::GroundingModel::load(&dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }

    #[getter]
    fn has_vq(&self) -> bool {
        self.inner.has_vq()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.config.embed_dim
    }

    fn encode_image(&self, features: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode_image(&features).map_err(py_err)?.vector)
    }

    /// `frames` is a list of per-frame feature vectors.
    fn encode_caption(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode_caption(&features(frames)?).map_err(py_err)?.vector)
    }

    /// Caption-to-image recall@n on the corpus test split, in percent.
    fn recall_at(&self, corpus: &PyCorpus, n: usize) -> PyResult<f64> {
        let (c2i, _) = trainer::evaluate_retrieval(&self.inner, &corpus.inner.test, &[n]).map_err(py_err)?;
        Ok(c2i.recall_at[&n])
    }
}

/// Trains on the corpus. Returns the plain model and, with `vq`, the
/// fine-tuned quantised one.
#[pyfunction]
#[pyo3(signature = (corpus, config=None, seed=None, vq=false))]
fn train(corpus: &PyCorpus, config: Option<&str>, seed: Option<u64>, vq: bool) -> PyResult<(PyModel, Option<PyModel>)> {
    let mut cfg = run_config(config, seed)?;
    cfg.train.vq_enabled |= vq;
    let out = trainer::train(&corpus.inner.train, &cfg.model, &cfg.train).map_err(py_err)?;
    Ok((PyModel { inner: out.plain }, out.vq.map(|inner| PyModel { inner })))
}

#[pyclass(name = "Codebook", module = "pygroundspeech")]
struct PyCodebook {
    inner: vq::Codebook,
}

#[pymethods]
impl PyCodebook {
    #[new]
    #[pyo3(signature = (codes, gamma=0.99))]
    fn new(codes: Vec<Vec<f64>>, gamma: f64) -> PyResult<Self> {
        Ok(PyCodebook {
            inner: vq::Codebook::from_rows(&codes, gamma).map_err(py_err)?,
        })
    }

    fn nearest(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.nearest(&x).map_err(py_err)
    }

    fn code(&self, k: usize) -> PyResult<Vec<f64>> {
        if k >= self.inner.n() {
            return Err(PyValueError::new_err("code index out of range"));
        }
        Ok(self.inner.code(k).to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }
}

#[pyclass(name = "Dictionary", module = "pygroundspeech")]
struct PyDictionary {
    inner: lexicon::PronDict,
}

#[pymethods]
impl PyDictionary {
    /// Parses CMUdict-format text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyDictionary {
            inner: lexicon::parse_dictionary(text, "<python>").map_err(py_err)?,
        })
    }

    fn pronunciation(&self, word: &str) -> Option<Vec<String>> {
        self.inner.get(word).map(|p| p.phones().to_vec())
    }

    /// Words whose pronunciation starts with `prefix`.
    fn cohort_size(&self, prefix: Vec<String>) -> usize {
        let prefix: Vec<String> = prefix.iter().map(|p| lexicon::strip_stress(p).to_string()).collect();
        lexicon::initial_cohort_size(&prefix, &self.inner)
    }

    /// Words one phone edit away from `phones`.
    fn density(&self, phones: Vec<String>) -> PyResult<usize> {
        let seq = PhoneSeq::new(&phones).map_err(py_err)?;
        Ok(lexicon::neighbourhood_density(&seq, &self.inner, NeighbourMode::EditOne))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Pearson chi-square for `[[a, b], [c, d]]` counts.
#[pyfunction]
#[pyo3(signature = (counts, yates=false))]
fn chi_square_2x2(counts: [[u64; 2]; 2], yates: bool) -> PyResult<f64> {
    experiments::chi_square_2x2(counts, yates).map_err(py_err)
}

/// 39-dimensional MFCC frames (with deltas, normalised) of a waveform.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=16000))]
fn mfcc(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let w = Waveform::new(samples, sample_rate).map_err(py_err)?;
    let fs = compute_mfcc(&w, &MfccConfig::default(), "py").map_err(py_err)?;
    Ok((0..fs.n_frames()).map(|t| fs.frame(t).to_vec()).collect())
}

#[pymodule]
fn pygroundspeech(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyDictionary>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(chi_square_2x2, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    Ok(())
}
