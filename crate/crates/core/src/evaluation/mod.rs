//! Benchmark loading, accuracy, and the analysis reports: helpful/harmful
//! image reliance, image-text relevance and attention erasure.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendDescriptor, JointEmbedder};
use crate::dataset::{QAPair, VQAPair};
use crate::error::{Error, Result};
use crate::inference::{predict_from_scores, EnsembleConfig, ItemFailure, Prediction, PredictionBatch, Predictor};
use crate::scoring::{cosine, ScoreVector};

pub mod attention;
pub mod benchmarks;

pub use attention::{attention_erasure, erase_patches, gold_attention, surviving_patches, ErasureArtifact};
pub use benchmarks::{load_benchmark, BenchmarkFormat, BenchmarkSpec};

/// Version stamped into every JSON report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fraction of predictions matching their gold answer.
///
/// Prediction ids must be unique and match the gold ids exactly; drop
/// excluded items from `golds` first (see [`batch_accuracy`]).
pub fn accuracy(predictions: &[Prediction], golds: &[QAPair]) -> Result<f64> {
    let mut gold_by_id = HashMap::with_capacity(golds.len());
    for g in golds {
        if gold_by_id.insert(g.id.as_str(), g.answer_index).is_some() {
            return Err(Error::Alignment(format!("duplicate gold id `{}`", g.id)));
        }
    }
    if predictions.len() != golds.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} gold items",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy over zero items"));
    }
    let mut seen = HashSet::with_capacity(predictions.len());
    let mut correct = 0usize;
    for p in predictions {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::Alignment(format!("duplicate prediction id `{}`", p.id)));
        }
        let gold = gold_by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::Alignment(format!("prediction `{}` has no gold item", p.id)))?;
        if p.predicted_index == *gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / predictions.len() as f64)
}

/// Accuracy over the items of a batch that did not fail.
pub fn batch_accuracy(batch: &PredictionBatch, golds: &[QAPair]) -> Result<f64> {
    let failed: HashSet<&str> = batch.failures.iter().map(|f| f.id.as_str()).collect();
    let kept: Vec<QAPair> = golds
        .iter()
        .filter(|g| !failed.contains(g.id.as_str()))
        .cloned()
        .collect();
    accuracy(&batch.predictions, &kept)
}

// ---------------------------------------------------------------------------
// Helpful / harmful imagination
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipKind {
    /// Wrong from text alone, right once the image is mixed in.
    Helpful,
    /// Right from text alone, wrong once the image is mixed in.
    Harmful,
    Neutral,
}

pub fn classify_flip(text_prediction: usize, ensemble_prediction: usize, gold: usize) -> FlipKind {
    match (text_prediction == gold, ensemble_prediction == gold) {
        (false, true) => FlipKind::Helpful,
        (true, false) => FlipKind::Harmful,
        _ => FlipKind::Neutral,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub id: String,
    pub gold: usize,
    pub text_prediction: usize,
    pub ensemble_prediction: usize,
    pub kind: FlipKind,
}

/// One benchmark row of the helpful/harmful table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub benchmark: String,
    pub lambda: f64,
    pub evaluated: usize,
    /// Accuracy of the ensembled predictions.
    pub accuracy: f64,
    pub text_accuracy: f64,
    pub helpful_count: usize,
    pub harmful_count: usize,
    pub neutral_count: usize,
    pub helpful_pct: f64,
    pub harmful_pct: f64,
    pub excluded_count: usize,
    pub excluded: Vec<ItemFailure>,
    pub flips: Vec<FlipRecord>,
}

/// Per-benchmark rows plus the model they were measured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelpfulHarmfulTable {
    pub schema_version: u32,
    pub model: String,
    pub rows: Vec<AnalysisReport>,
}

impl HelpfulHarmfulTable {
    pub fn new(model: &str, rows: Vec<AnalysisReport>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            model: model.to_string(),
            rows,
        }
    }
}

fn pct(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

/// Compares text-only predictions with ensembled ones item by item.
/// Percentages are over every evaluated item.
pub fn helpful_harmful_from_scores(
    benchmark: &str,
    scored: &[(String, ScoreVector, usize)],
    cfg: &EnsembleConfig,
) -> Result<AnalysisReport> {
    cfg.validate()?;
    if cfg.lambda <= 0.0 {
        return Err(Error::invalid("helpful/harmful analysis needs lambda > 0"));
    }
    if scored.is_empty() {
        return Err(Error::invalid("no items to analyze"));
    }
    let text_cfg = EnsembleConfig {
        lambda: 0.0,
        ..*cfg
    };
    let mut flips = Vec::with_capacity(scored.len());
    let (mut text_correct, mut ens_correct) = (0usize, 0usize);
    for (id, sv, gold) in scored {
        let t = predict_from_scores(id, sv, &text_cfg)?.predicted_index;
        let e = predict_from_scores(id, sv, cfg)?.predicted_index;
        text_correct += usize::from(t == *gold);
        ens_correct += usize::from(e == *gold);
        flips.push(FlipRecord {
            id: id.clone(),
            gold: *gold,
            text_prediction: t,
            ensemble_prediction: e,
            kind: classify_flip(t, e, *gold),
        });
    }
    let count = |k: FlipKind| flips.iter().filter(|f| f.kind == k).count();
    let n = scored.len();
    let (helpful, harmful) = (count(FlipKind::Helpful), count(FlipKind::Harmful));
    Ok(AnalysisReport {
        benchmark: benchmark.to_string(),
        lambda: cfg.lambda,
        evaluated: n,
        accuracy: ens_correct as f64 / n as f64,
        text_accuracy: text_correct as f64 / n as f64,
        helpful_count: helpful,
        harmful_count: harmful,
        neutral_count: count(FlipKind::Neutral),
        helpful_pct: pct(helpful, n),
        harmful_pct: pct(harmful, n),
        excluded_count: 0,
        excluded: Vec::new(),
        flips,
    })
}

/// Scores every item with its image and runs the flip analysis at the
/// predictor's lambda. Items that fail to score are excluded and listed.
pub fn helpful_harmful(benchmark: &str, items: &[VQAPair], predictor: &Predictor<'_>) -> Result<AnalysisReport> {
    let mut scored = Vec::with_capacity(items.len());
    let mut excluded = Vec::new();
    for (pair, r) in items.iter().zip(predictor.score_all(items, true)) {
        match r.and_then(|sv| pair.qa.validate().map(|_| sv)) {
            Ok(sv) => scored.push((pair.qa.id.clone(), sv, pair.qa.answer_index)),
            Err(e) => excluded.push(ItemFailure {
                id: pair.qa.id.clone(),
                kind: e.kind().to_string(),
                message: e.to_string(),
            }),
        }
    }
    let mut report = helpful_harmful_from_scores(benchmark, &scored, &predictor.config)?;
    report.excluded_count = excluded.len();
    report.excluded = excluded;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Image-text relevance
// ---------------------------------------------------------------------------

/// `100 * max(0, cos(a, b))`.
pub fn relevance_from_embeddings(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let c = cosine(a, b).ok_or_else(|| Error::invalid("zero-norm embedding"))?;
    Ok(100.0 * c.max(0.0))
}

pub fn relevance_score(text: &str, image: &crate::backends::ImageRef, scorer: &dyn JointEmbedder) -> Result<f64> {
    let t = scorer.embed_text(text)?;
    let i = scorer.embed_image(image)?;
    relevance_from_embeddings(&t, &i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRow {
    pub dataset: String,
    pub mean_relevance: f64,
    pub items: usize,
    pub excluded: Vec<ItemFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub schema_version: u32,
    pub scorer: BackendDescriptor,
    pub rows: Vec<RelevanceRow>,
}

/// Mean question-image relevance per dataset. Items without an image or
/// whose embedding fails are excluded; a dataset with no scoreable item is
/// an error.
pub fn relevance_report(datasets: &[(String, Vec<VQAPair>)], scorer: &dyn JointEmbedder) -> Result<RelevanceReport> {
    let mut rows = Vec::with_capacity(datasets.len());
    for (name, pairs) in datasets {
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut excluded = Vec::new();
        for p in pairs {
            let r = crate::scoring::require_image(p).and_then(|img| relevance_score(&p.qa.question, img, scorer));
            match r {
                Ok(s) => {
                    sum += s;
                    n += 1;
                }
                Err(e) => excluded.push(ItemFailure {
                    id: p.qa.id.clone(),
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                }),
            }
        }
        if n == 0 {
            return Err(Error::invalid(format!("dataset `{name}` has no scoreable items")));
        }
        rows.push(RelevanceRow {
            dataset: name.clone(),
            mean_relevance: sum / n as f64,
            items: n,
            excluded,
        });
    }
    Ok(RelevanceReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scorer: scorer.descriptor().clone(),
        rows,
    })
}
