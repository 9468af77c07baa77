//! Python bindings for `mcfuse`.
//!
//! Structured results (reports, manifests) are returned as plain Python
//! dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use mcfuse::backends::{
    ScoringMode, StubCaptioner, StubGenerator, StubVisualEncoder, TextInput, TextScorer, ToyConfig, ToyModel,
    VisualEncoder, Vocabulary,
};
use mcfuse::dataset::{build_dataset as build, read_vqa_jsonl, BuildConfig};
use mcfuse::error::Error;
use mcfuse::evaluation::{load_benchmark as load_bench, BenchmarkFormat, BenchmarkSpec};
use mcfuse::inference::{self, EnsembleConfig, Predictor, TextChannel};
use mcfuse::scoring::{lm_score, ScoreVector};
use mcfuse::training::{self, Checkpoint, RankingConfig, TrainConfig};

create_exception!(mcfuse, McfuseError, PyException);

fn err(e: Error) -> PyErr {
    McfuseError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(Error::from(e)))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Hinge ranking loss of the gold score against every distractor.
#[pyfunction]
#[pyo3(signature = (scores, gold, margin = 1.0))]
fn ranking_loss(scores: Vec<f64>, gold: usize, margin: f64) -> PyResult<f64> {
    training::ranking_loss(&scores, gold, margin).map_err(err)
}

/// Sum of the ranking losses over the LM, ITM and joint channels.
#[pyfunction]
#[pyo3(signature = (lm, itm, gold, margin = 1.0))]
fn combined_loss(lm: Vec<f64>, itm: Vec<f64>, gold: usize, margin: f64) -> PyResult<f64> {
    let sv = ScoreVector::new(lm, itm).map_err(err)?;
    training::combined_loss(&sv, gold, margin).map_err(err)
}

#[pyfunction]
fn softmax(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    inference::softmax(&scores).map_err(err)
}

/// `(probabilities, predicted_index)` of `(1 - lam) * p_text + lam * p_itm`.
#[pyfunction]
fn ensemble(p_text: Vec<f64>, p_itm: Vec<f64>, lam: f64) -> PyResult<(Vec<f64>, usize)> {
    let p = inference::ensemble(&p_text, &p_itm, lam).map_err(err)?;
    Ok((p.probs, p.predicted_index))
}

/// Accuracy at every grid point. `items` holds `(lm, itm, gold)` tuples.
#[pyfunction]
#[pyo3(signature = (items, grid = None, text_channel = "lm"))]
fn sweep<'py>(
    py: Python<'py>,
    items: Vec<(Vec<f64>, Vec<f64>, usize)>,
    grid: Option<Vec<f64>>,
    text_channel: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let scored = items
        .into_iter()
        .map(|(lm, itm, y)| ScoreVector::new(lm, itm).map(|sv| (sv, y)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let grid = grid.unwrap_or_else(inference::default_grid);
    let channel: TextChannel = parse(text_channel)?;
    let result = inference::sweep_lambda(&scored, &grid, channel).map_err(err)?;
    to_py(py, &result)
}

/// Clipped cosine similarity scaled to [0, 100].
#[pyfunction]
fn relevance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    mcfuse::evaluation::relevance_from_embeddings(&a, &b).map_err(err)
}

/// Builds the synthetic dataset and returns the per-split manifests.
#[pyfunction]
#[pyo3(signature = (out, kb = None, vcr = None, seed = 0, dev_fraction = 0.1, resolution = 384, workers = 4))]
#[allow(clippy::too_many_arguments)]
fn build_dataset<'py>(
    py: Python<'py>,
    out: PathBuf,
    kb: Option<PathBuf>,
    vcr: Option<PathBuf>,
    seed: u64,
    dev_fraction: f64,
    resolution: u32,
    workers: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = BuildConfig::new(out);
    cfg.kb = kb;
    cfg.vcr = vcr;
    cfg.seed = seed;
    cfg.dev_fraction = dev_fraction;
    cfg.resolution = resolution;
    cfg.workers = workers;
    let report = py
        .detach(|| build(&cfg, &StubGenerator::new(seed), &StubCaptioner::default()))
        .map_err(err)?;
    to_py(py, &report)
}

/// Reads a public benchmark file into normalized items.
#[pyfunction]
fn load_benchmark<'py>(py: Python<'py>, path: PathBuf, format: &str, n_choices: usize) -> PyResult<Bound<'py, PyAny>> {
    let format: BenchmarkFormat = parse(format)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("benchmark").to_string();
    let items = load_bench(&BenchmarkSpec::new(&name, format, n_choices, &path)).map_err(err)?;
    to_py(py, &items)
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("mcfuse".to_string()).chain(args).collect();
    py.detach(|| mcfuse::cli::run(argv))
}

/// The trainable toy text scorer with its adapters and a stub visual encoder.
#[pyclass(name = "Model", module = "mcfuse")]
struct PyModel {
    model: ToyModel,
    visual: StubVisualEncoder,
    mode: ScoringMode,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed = 0, reduction_factor = 16, mode = "masked"))]
    fn new(seed: u64, reduction_factor: usize, mode: &str) -> PyResult<Self> {
        let config = ToyConfig {
            seed,
            reduction_factor,
            ..ToyConfig::default()
        };
        Ok(Self {
            model: ToyModel::new(config, Vocabulary::default()).map_err(err)?,
            visual: StubVisualEncoder::default(),
            mode: parse(mode)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = training::load_checkpoint(&path).map_err(err)?;
        let visual = match &ck.header.visual_encoder {
            Some(d) => StubVisualEncoder::from_descriptor(d).map_err(err)?,
            None => StubVisualEncoder::default(),
        };
        let mode = ck.header.mode;
        Ok(Self {
            model: ck.into_model().map_err(err)?,
            visual,
            mode,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut ck = Checkpoint::from_model(&self.model, self.mode);
        ck.header.visual_encoder = Some(self.visual.descriptor().clone());
        training::save_checkpoint(&path, &ck).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    #[getter]
    fn backbone_checksum(&self) -> String {
        self.model.backbone.checksum()
    }

    #[getter]
    fn adapter_checksum(&self) -> String {
        self.model.adapters.checksum()
    }

    /// Mean token log-likelihood of each choice given the question.
    fn lm_scores(&self, question: &str, choices: Vec<String>) -> PyResult<Vec<f64>> {
        choices
            .iter()
            .map(|c| lm_score(&TextInput::question_choice(question, c), &self.model, self.mode))
            .collect::<Result<_, _>>()
            .map_err(err)
    }

    /// Trains the adapters on a dataset file and returns the report.
    #[pyo3(signature = (data, epochs = 2, batch_size = 32, learning_rate = 1e-5, margin = 1.0, seed = 0, max_steps = None))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        data: PathBuf,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        margin: f64,
        seed: u64,
        max_steps: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let pairs = read_vqa_jsonl(&data).map_err(err)?;
        let items = training::prepare_items(&pairs, &self.visual).map_err(err)?;
        let cfg = TrainConfig {
            batch_size,
            learning_rate,
            epochs,
            seed,
            max_steps,
            mode: self.mode,
        };
        let rcfg = RankingConfig {
            margin,
            ..RankingConfig::default()
        };
        let model = &mut self.model;
        let report = py.detach(|| training::train(model, &items, &cfg, &rcfg)).map_err(err)?;
        to_py(py, &report)
    }

    /// Ensemble predictions for a dataset file: one dict per item, plus
    /// the items that failed.
    #[pyo3(signature = (data, lam = 0.35, text_channel = "lm"))]
    fn predict<'py>(&self, py: Python<'py>, data: PathBuf, lam: f64, text_channel: &str) -> PyResult<Bound<'py, PyAny>> {
        let pairs = read_vqa_jsonl(&data).map_err(err)?;
        let config = EnsembleConfig {
            lambda: lam,
            text_channel: parse(text_channel)?,
        };
        config.validate().map_err(err)?;
        let predictor = Predictor {
            text: &self.model,
            visual: &self.visual,
            imaginer: None,
            mode: self.mode,
            config,
        };
        let batch = predictor.predict_all(&pairs);
        let golds: Vec<_> = pairs.iter().map(|p| p.qa.clone()).collect();
        let accuracy = mcfuse::evaluation::batch_accuracy(&batch, &golds).ok();
        to_py(
            py,
            &serde_json::json!({
                "accuracy": accuracy,
                "predictions": batch.predictions,
                "failures": batch.failures,
            }),
        )
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(params={}, mode={}, descriptor={})",
            self.model.param_count(),
            self.mode.as_str(),
            self.model.descriptor().name
        )
    }
}

#[pymodule]
#[pyo3(name = "mcfuse")]
fn mcfuse_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("McfuseError", m.py().get_type::<McfuseError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(ranking_loss, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(relevance, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
