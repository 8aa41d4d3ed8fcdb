//! Python bindings: BPE, the lexical translator, metrics, dataset selection and full
//! experiment runs.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use backtrans_core::bt::{select_based_on_bleu, CandidateResult, SelectionPolicy};
use backtrans_core::corpus::{BilingualCorpus, LanguageTag, SentencePair};
use backtrans_core::experiment::{
    emit_report, load_record, run_experiment, ExperimentConfig, ReportFormat, ReportRow, ReportTable,
};
use backtrans_core::metrics::{self, TokenizerProfile};
use backtrans_core::subword::{self, BpeModel, TokenSeq};
use backtrans_core::translator::{self, BeamConfig, Direction, TrainConfig, TranslatorModel};

create_exception!(backtrans, BacktransError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    BacktransError::new_err(e.to_string())
}

fn profile(name: &str) -> PyResult<TokenizerProfile> {
    TokenizerProfile::by_name(name).ok_or_else(|| err(format!("unknown tokenizer profile {name}")))
}

fn tag(s: &str) -> PyResult<LanguageTag> {
    LanguageTag::new(s).map_err(err)
}

#[pyclass(name = "Bpe", module = "backtrans", frozen)]
struct PyBpe {
    inner: BpeModel,
}

#[pymethods]
impl PyBpe {
    #[staticmethod]
    fn learn(sentences: Vec<String>, vocab_size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: subword::learn_bpe(&sentences, vocab_size).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: BpeModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn apply(&self, sentence: &str) -> Vec<String> {
        subword::apply_bpe(&self.inner, sentence).tokens
    }

    fn decode(&self, tokens: Vec<String>) -> PyResult<String> {
        subword::decode_bpe(&TokenSeq { tokens }).map_err(err)
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint().to_string()
    }

    #[getter]
    fn merges(&self) -> Vec<(String, String)> {
        self.inner.merges().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.merges().len()
    }
}

fn corpus(pairs: Vec<(String, String)>, source: &str, target: &str, id: &str) -> PyResult<BilingualCorpus> {
    let pairs = pairs.into_iter().map(|(s, t)| SentencePair::new(s, t, id)).collect();
    Ok(BilingualCorpus::new(id, tag(source)?, tag(target)?).with_pairs(pairs))
}

#[pyclass(name = "Model", module = "backtrans", frozen)]
struct PyModel {
    inner: TranslatorModel,
}

#[pymethods]
impl PyModel {
    /// Trains on `(source, target)` pairs; `valid` defaults to the training pairs.
    #[staticmethod]
    #[pyo3(signature = (pairs, bpe, source_language, target_language, valid=None, seed=0, max_epochs=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        pairs: Vec<(String, String)>,
        bpe: &PyBpe,
        source_language: &str,
        target_language: &str,
        valid: Option<Vec<(String, String)>>,
        seed: u64,
        max_epochs: Option<usize>,
    ) -> PyResult<Self> {
        let train = corpus(pairs, source_language, target_language, "train")?;
        let valid = match valid {
            Some(v) => corpus(v, source_language, target_language, "valid")?,
            None => train.clone(),
        };
        let mut config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if let Some(m) = max_epochs {
            config.max_epochs = m;
        }
        let inner = py
            .detach(|| translator::train(&train, &valid, &bpe.inner, &config))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: translator::load_model(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        translator::save_model(&self.inner, &path).map_err(err)
    }

    #[pyo3(signature = (sentences, bpe, beam_width=5))]
    fn translate(
        &self,
        py: Python<'_>,
        sentences: Vec<String>,
        bpe: &PyBpe,
        beam_width: usize,
    ) -> PyResult<Vec<String>> {
        let beam = BeamConfig {
            beam_width,
            ..BeamConfig::default()
        };
        py.detach(|| translator::translate(&self.inner, &sentences, &beam, &bpe.inner))
            .map_err(err)
    }

    #[getter]
    fn direction(&self) -> String {
        self.inner.direction().to_string()
    }

    #[getter]
    fn bpe_fingerprint(&self) -> String {
        self.inner.bpe_fingerprint().to_string()
    }

    fn lexical_prob(&self, source: &str, target: &str) -> f64 {
        self.inner.lexical_prob(source, target)
    }
}

#[pyfunction]
#[pyo3(signature = (hypotheses, references, profile="plain"))]
fn bleu(hypotheses: Vec<String>, references: Vec<String>, profile: &str) -> PyResult<f64> {
    Ok(metrics::bleu(&hypotheses, &references, &self::profile(profile)?)
        .map_err(err)?
        .score)
}

#[pyfunction]
fn sacrebleu(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    Ok(metrics::sacrebleu(&hypotheses, &references).map_err(err)?.score)
}

#[pyfunction]
fn chrf2(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    Ok(metrics::chrf2(&hypotheses, &references).map_err(err)?.score)
}

#[pyfunction]
fn ter(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    Ok(metrics::ter(&hypotheses, &references).map_err(err)?.score)
}

/// All four metrics as a dict; `gain` is present when `baseline_bleu` is given.
#[pyfunction]
#[pyo3(signature = (hypotheses, references, baseline_bleu=None, profile="plain"))]
fn evaluate<'py>(
    py: Python<'py>,
    hypotheses: Vec<String>,
    references: Vec<String>,
    baseline_bleu: Option<f64>,
    profile: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate_all_with(&hypotheses, &references, None, &self::profile(profile)?).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("bleu", r.bleu.score)?;
    d.set_item("sacrebleu", r.sacrebleu.score)?;
    d.set_item("chrf2", r.chrf2.score)?;
    d.set_item("ter", r.ter.score)?;
    d.set_item("signature", r.sacrebleu.signature)?;
    if let Some(b) = baseline_bleu {
        d.set_item("gain", r.bleu.score - b)?;
    }
    Ok(d)
}

/// Indices of the selected candidates and of the best one, given their validation BLEU.
#[pyfunction]
#[pyo3(signature = (scores, baseline_bleu, top_k=Some(3)))]
fn select_based_on_bleu_scores(
    scores: Vec<f64>,
    baseline_bleu: f64,
    top_k: Option<usize>,
) -> PyResult<(Vec<usize>, Option<usize>)> {
    let dir = Direction::new(tag("xx")?, tag("yy")?);
    let candidates: Vec<CandidateResult> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| CandidateResult {
            dataset_id: i.to_string(),
            dataset_index: i,
            direction: dir.clone(),
            model: format!("candidate/{i}"),
            bleu_on_valid: s,
            baseline_bleu,
        })
        .collect();
    let policy = match top_k {
        Some(k) => SelectionPolicy::TopK(k),
        None => SelectionPolicy::AboveBaseline,
    };
    let sel = select_based_on_bleu(&candidates, baseline_bleu, policy);
    Ok((sel.selected, sel.best))
}

fn rows_to_py<'py>(py: Python<'py>, rows: &[ReportRow]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("direction", &r.direction)?;
            d.set_item("model", &r.label)?;
            d.set_item("bleu", r.bleu)?;
            d.set_item("sacrebleu", r.sacrebleu)?;
            d.set_item("chrf2", r.chrf2)?;
            d.set_item("ter", r.ter)?;
            d.set_item("baseline", r.baseline)?;
            Ok(d)
        })
        .collect()
}

/// Runs (or resumes) an experiment and returns its evaluation rows.
#[pyfunction]
#[pyo3(signature = (config, run_dir, seed=None))]
fn run<'py>(
    py: Python<'py>,
    config: PathBuf,
    run_dir: PathBuf,
    seed: Option<u64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = ExperimentConfig::load(&config).map_err(err)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let record = py.detach(|| run_experiment(&cfg, &run_dir)).map_err(err)?;
    rows_to_py(py, &record.rows)
}

/// The report of a finished run directory, as TSV or aligned text.
#[pyfunction]
#[pyo3(signature = (run_dir, format="tsv", decimals=2))]
fn report(run_dir: PathBuf, format: &str, decimals: usize) -> PyResult<String> {
    let format = match format {
        "tsv" => ReportFormat::Tsv,
        "text" => ReportFormat::Text,
        f => return Err(err(format!("unknown report format {f}"))),
    };
    let record = load_record(&run_dir).map_err(err)?;
    Ok(emit_report(&ReportTable { rows: record.rows }, format, decimals))
}

#[pymodule]
fn backtrans(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BacktransError", m.py().get_type::<BacktransError>())?;
    m.add_class::<PyBpe>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(sacrebleu, m)?)?;
    m.add_function(wrap_pyfunction!(chrf2, m)?)?;
    m.add_function(wrap_pyfunction!(ter, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(select_based_on_bleu_scores, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
