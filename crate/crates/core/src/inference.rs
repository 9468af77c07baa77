//! Answer prediction: per-channel softmax and a convex mix of the text and
//! image distributions.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{ImageRef, ScoringMode, TextScorer, VisualEncoder};
use crate::dataset::{Imaginer, VQAPair};
use crate::error::{Error, Result};
use crate::scoring::{render_question, score_with_features, ScoreVector, ScoringContext};

/// Which score stands in for the text side of the mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextChannel {
    #[default]
    Lm,
    Joint,
}

impl FromStr for TextChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lm" => Ok(TextChannel::Lm),
            "joint" => Ok(TextChannel::Joint),
            _ => Err(Error::invalid(format!("unknown text channel `{s}`"))),
        }
    }
}

impl fmt::Display for TextChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextChannel::Lm => "lm",
            TextChannel::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub lambda: f64,
    #[serde(default)]
    pub text_channel: TextChannel,
}

impl EnsembleConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let c = Self {
            lambda,
            text_channel: TextChannel::Lm,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    /// Whether image scores are needed at all.
    pub fn needs_image(&self) -> bool {
        self.lambda > 0.0 || self.text_channel == TextChannel::Joint
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probs: Vec<f64>,
    pub predicted_index: usize,
    pub p_text: Vec<f64>,
    /// Absent when the image channel was never computed.
    pub p_itm: Option<Vec<f64>>,
}

/// Softmax with max subtraction.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    Ok(crate::scoring::softmax_unchecked(scores))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `(1 − λ)·p_text + λ·p_itm` and its argmax.
pub fn ensemble(p_text: &[f64], p_itm: &[f64], lambda: f64) -> Result<Prediction> {
    if p_text.len() != p_itm.len() {
        return Err(Error::invalid(format!(
            "distribution lengths differ: {} vs {}",
            p_text.len(),
            p_itm.len()
        )));
    }
    if p_text.is_empty() {
        return Err(Error::invalid("empty distributions"));
    }
    EnsembleConfig::new(lambda)?;
    let probs: Vec<f64> = p_text
        .iter()
        .zip(p_itm)
        .map(|(t, i)| (1.0 - lambda) * t + lambda * i)
        .collect();
    Ok(Prediction {
        id: String::new(),
        predicted_index: argmax(&probs),
        probs,
        p_text: p_text.to_vec(),
        p_itm: Some(p_itm.to_vec()),
    })
}

/// Prediction from already computed scores. When the image channel is not
/// needed it is never read, so text-only score vectors are accepted.
pub fn predict_from_scores(id: &str, sv: &ScoreVector, cfg: &EnsembleConfig) -> Result<Prediction> {
    cfg.validate()?;
    if cfg.needs_image() && !sv.itm_usable {
        return Err(Error::ChannelMissing(format!(
            "{id}: lambda {} needs image scores",
            cfg.lambda
        )));
    }
    let text = match cfg.text_channel {
        TextChannel::Lm => &sv.lm,
        TextChannel::Joint => &sv.joint,
    };
    let p_text = softmax(text)?;
    let mut pred = if cfg.lambda == 0.0 {
        Prediction {
            id: String::new(),
            predicted_index: argmax(&p_text),
            probs: p_text.clone(),
            p_text,
            p_itm: None,
        }
    } else {
        ensemble(&p_text, &softmax(&sv.itm)?, cfg.lambda)?
    };
    pred.id = id.to_string();
    Ok(pred)
}

// ---------------------------------------------------------------------------
// Lambda sweep
// ---------------------------------------------------------------------------

/// Default sweep grid, 0 to 1 in steps of 0.05.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Parses `start:end:step` or a comma-separated list. Range points are
/// computed as `start + i·step` so they do not accumulate error.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad number `{s}` in grid `{spec}`")))
    };
    let grid: Vec<f64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::invalid(format!("grid `{spec}` is not start:end:step")));
        }
        let (start, end, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step.is_nan() || step <= 0.0 || end < start {
            return Err(Error::invalid(format!("grid `{spec}` needs step > 0 and end ≥ start")));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize;
        (0..=count).map(|i| start + i as f64 * step).collect()
    } else {
        spec.split(',').map(num).collect::<Result<_>>()?
    };
    validate_grid(&grid)?;
    Ok(grid)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::invalid(format!("lambda {bad} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_lambda: f64,
    pub best_accuracy: f64,
    /// `(lambda, accuracy)` for each grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,accuracy\n");
        for (l, a) in &self.curve {
            s.push_str(&format!("{l},{a}\n"));
        }
        s
    }
}

/// Fraction correct at a fixed configuration.
pub fn accuracy_at(scored: &[(ScoreVector, usize)], cfg: &EnsembleConfig) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::invalid("no scored items"));
    }
    let mut correct = 0usize;
    for (sv, gold) in scored {
        if predict_from_scores("", sv, cfg)?.predicted_index == *gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / scored.len() as f64)
}

/// Accuracy at each λ; the best is the first maximum in grid order.
pub fn sweep_lambda(
    scored: &[(ScoreVector, usize)],
    grid: &[f64],
    text_channel: TextChannel,
) -> Result<SweepResult> {
    validate_grid(grid)?;
    if scored.is_empty() {
        return Err(Error::invalid("dev set is empty"));
    }
    let mut curve = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = EnsembleConfig {
            lambda,
            text_channel,
        };
        curve.push((lambda, accuracy_at(scored, &cfg)?));
    }
    let mut best = 0;
    for (i, &(l, a)) in curve.iter().enumerate() {
        let (bl, ba) = curve[best];
        if a > ba || (a == ba && l < bl) {
            best = i;
        }
    }
    Ok(SweepResult {
        best_lambda: curve[best].0,
        best_accuracy: curve[best].1,
        curve,
    })
}

// ---------------------------------------------------------------------------
// End-to-end prediction
// ---------------------------------------------------------------------------

/// Backends and settings for end-to-end prediction.
pub struct Predictor<'a> {
    pub text: &'a dyn TextScorer,
    pub visual: &'a dyn VisualEncoder,
    /// Produces images for pairs that lack one.
    pub imaginer: Option<Imaginer<'a>>,
    pub mode: ScoringMode,
    pub config: EnsembleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub id: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBatch {
    pub predictions: Vec<Prediction>,
    pub failures: Vec<ItemFailure>,
}

impl<'a> Predictor<'a> {
    fn image_for(&self, pair: &VQAPair) -> Result<ImageRef> {
        match (&pair.image, &self.imaginer) {
            (Some(img), _) => Ok(img.clone()),
            (None, Some(im)) => im.imagine(&pair.qa.question),
            (None, None) => Err(Error::MissingImage(format!(
                "pair {} has no image and no generator is configured",
                pair.qa.id
            ))),
        }
    }

    /// Scores every channel the configuration needs; the image is never
    /// touched when it is not needed.
    pub fn scores(&self, pair: &VQAPair, with_image: bool) -> Result<ScoreVector> {
        let ctx = ScoringContext {
            text: self.text,
            visual: None,
            mode: self.mode,
        };
        let context = render_question(&pair.qa.question, pair.caption_prefix.as_deref());
        if !with_image {
            return score_with_features(&context, &pair.qa.choices, None, &ctx);
        }
        let feats = self.visual.encode(&self.image_for(pair)?)?;
        score_with_features(&context, &pair.qa.choices, Some(&feats), &ctx)
    }

    pub fn predict(&self, pair: &VQAPair) -> Result<Prediction> {
        pair.qa.validate()?;
        let sv = self.scores(pair, self.config.needs_image())?;
        predict_from_scores(&pair.qa.id, &sv, &self.config)
    }

    /// Parallel over items; results keep input order and failures are
    /// reported instead of aborting the batch.
    pub fn predict_all(&self, pairs: &[VQAPair]) -> PredictionBatch {
        let results: Vec<Result<Prediction>> = pairs.par_iter().map(|p| self.predict(p)).collect();
        collect_batch(pairs, results)
    }

    /// Full score vectors for every pair, in order.
    pub fn score_all(&self, pairs: &[VQAPair], with_image: bool) -> Vec<Result<ScoreVector>> {
        pairs.par_iter().map(|p| self.scores(p, with_image)).collect()
    }
}

fn collect_batch(pairs: &[VQAPair], results: Vec<Result<Prediction>>) -> PredictionBatch {
    let mut predictions = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (p, r) in pairs.iter().zip(results) {
        match r {
            Ok(pred) => predictions.push(pred),
            Err(e) => {
                log::warn!("item {} failed: {e}", p.qa.id);
                failures.push(ItemFailure {
                    id: p.qa.id.clone(),
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
    PredictionBatch {
        predictions,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(lm: &[f64], itm: &[f64]) -> ScoreVector {
        ScoreVector::new(lm.to_vec(), itm.to_vec()).unwrap()
    }

    #[test]
    fn softmax_hand_cases() {
        assert_eq!(softmax(&[0.0, 0.0, 0.0]).unwrap(), vec![1.0 / 3.0; 3]);
        let p = softmax(&[2.0, 0.0]).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.88080).abs() < 1e-5);
        assert!(softmax(&[f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn ensemble_boundaries_and_ties() {
        let (t, i) = ([0.8, 0.2], [0.2, 0.8]);
        assert_eq!(ensemble(&t, &i, 0.0).unwrap().probs, t.to_vec());
        assert_eq!(ensemble(&t, &i, 1.0).unwrap().probs, i.to_vec());
        let half = ensemble(&t, &i, 0.5).unwrap();
        assert_eq!(half.probs, vec![0.5, 0.5]);
        assert_eq!(half.predicted_index, 0);
        assert!(ensemble(&t, &[1.0], 0.5).is_err());
        assert!(ensemble(&t, &i, 1.5).is_err());
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:1:0.05").unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g, default_grid());
        assert_eq!(g[7], 7.0 * 0.05);
        assert_eq!(parse_grid("0.2, 0.4").unwrap(), vec![0.2, 0.4]);
        assert!(parse_grid("0:2:0.5").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("").is_err());
    }

    #[test]
    fn sweep_prefers_text_when_image_is_anticorrelated() {
        let scored = vec![
            (sv(&[3.0, 0.0, 0.0], &[0.0, 1.0, 0.0]), 0),
            (sv(&[0.0, 3.0, 0.0], &[0.0, 0.0, 1.0]), 1),
        ];
        let r = sweep_lambda(&scored, &default_grid(), TextChannel::Lm).unwrap();
        assert_eq!(r.best_lambda, 0.0);
        let one = sweep_lambda(&scored, &[0.3], TextChannel::Lm).unwrap();
        assert_eq!(one.best_lambda, 0.3);
        assert!(sweep_lambda(&[], &[0.3], TextChannel::Lm).is_err());
    }

    #[test]
    fn lambda_zero_accepts_text_only_scores() {
        let s = ScoreVector::text_only(vec![0.1, 0.5]).unwrap();
        let p = predict_from_scores("a", &s, &EnsembleConfig::new(0.0).unwrap()).unwrap();
        assert_eq!(p.predicted_index, 1);
        assert!(p.p_itm.is_none());
        assert!(matches!(
            predict_from_scores("a", &s, &EnsembleConfig::new(0.1).unwrap()),
            Err(Error::ChannelMissing(_))
        ));
    }

    proptest! {
        #[test]
        fn ensemble_is_a_distribution_between_its_inputs(
            a in proptest::collection::vec(-10.0f64..10.0, 2..6),
            b_seed in proptest::collection::vec(-10.0f64..10.0, 6),
            lambda in 0.0f64..=1.0,
            shift in -50.0f64..50.0,
        ) {
            let b = &b_seed[..a.len()];
            let (pa, pb) = (softmax(&a).unwrap(), softmax(b).unwrap());
            let e = ensemble(&pa, &pb, lambda).unwrap();
            prop_assert!((e.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for i in 0..a.len() {
                let (lo, hi) = (pa[i].min(pb[i]), pa[i].max(pb[i]));
                prop_assert!(e.probs[i] >= lo - 1e-15 && e.probs[i] <= hi + 1e-15);
            }
            let shifted: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let ps = softmax(&shifted).unwrap();
            for i in 0..a.len() {
                prop_assert!((ps[i] - pa[i]).abs() <= 1e-12);
            }
        }
    }
}
