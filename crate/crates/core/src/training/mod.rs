//! Adapter training with a margin ranking objective over three score
//! channels.
//!
//! The objective is the sum of one hinge ranking loss per channel (LM, ITM
//! and their average). Gradients are routed by construction: LM scores
//! depend only on the LM adapter and ITM scores only on the ITM adapter, so
//! the joint channel is the only one that reaches both.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backends::{ScoringMode, TextInput, ToyModel, VisualEncoder, VisualFeatures};
use crate::dataset::VQAPair;
use crate::error::{Error, Result};
use crate::scoring::{render_question, ScoreVector};
use crate::text::seeded_rng;

pub mod adapters;
pub mod checkpoint;
pub mod gradcheck;

pub use adapters::{AdapterState, ItmAdapter, ParallelAdapter};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{gradient_check, GradCheckReport};

pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Lm,
    Itm,
    Joint,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Lm, Channel::Itm, Channel::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Lm => "lm",
            Channel::Itm => "itm",
            Channel::Joint => "joint",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lm" => Ok(Channel::Lm),
            "itm" => Ok(Channel::Itm),
            "joint" => Ok(Channel::Joint),
            _ => Err(Error::invalid(format!("unknown channel `{s}`"))),
        }
    }
}

/// Multipliers on the per-channel ranking losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub lm: f64,
    pub itm: f64,
    pub joint: f64,
}

impl Default for ChannelWeights {
    fn default() -> Self {
        Self {
            lm: 1.0,
            itm: 1.0,
            joint: 1.0,
        }
    }
}

impl ChannelWeights {
    pub fn get(&self, c: Channel) -> f64 {
        match c {
            Channel::Lm => self.lm,
            Channel::Itm => self.itm,
            Channel::Joint => self.joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    pub margin: f64,
    pub channels: BTreeSet<Channel>,
    #[serde(default)]
    pub weights: ChannelWeights,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            channels: Channel::ALL.into_iter().collect(),
            weights: ChannelWeights::default(),
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid("margin must be positive"));
        }
        if self.channels.is_empty() {
            return Err(Error::invalid("at least one channel is required"));
        }
        if Channel::ALL
            .iter()
            .any(|&c| !(self.weights.get(c) >= 0.0 && self.weights.get(c).is_finite()))
        {
            return Err(Error::invalid("channel weights must be finite and non-negative"));
        }
        if self.channels.iter().all(|&c| self.weights.get(c) == 0.0) {
            return Err(Error::invalid("every selected channel has zero weight"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps, if set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub mode: ScoringMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-5,
            epochs: 2,
            seed: 0,
            max_steps: None,
            mode: ScoringMode::Masked,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn check_gold(n: usize, y: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid("ranking needs at least two choices"));
    }
    if y >= n {
        return Err(Error::invalid(format!("gold index {y} out of range for {n} choices")));
    }
    Ok(())
}

/// `(1/n) Σ_{i≠y} max(0, η − S_y + S_i)`
pub fn ranking_loss(scores: &[f64], y: usize, margin: f64) -> Result<f64> {
    check_gold(scores.len(), y)?;
    let n = scores.len() as f64;
    let sum: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, s)| (margin - scores[y] + s).max(0.0))
        .sum();
    Ok(sum / n)
}

/// Subgradient of [`ranking_loss`] with respect to each score. A hinge
/// sitting exactly at zero contributes nothing.
pub fn ranking_loss_grad(scores: &[f64], y: usize, margin: f64) -> Result<Vec<f64>> {
    check_gold(scores.len(), y)?;
    let inv_n = 1.0 / scores.len() as f64;
    let mut g = vec![0.0; scores.len()];
    for i in (0..scores.len()).filter(|&i| i != y) {
        if margin - scores[y] + scores[i] > 0.0 {
            g[i] += inv_n;
            g[y] -= inv_n;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelLosses {
    pub lm: f64,
    pub itm: f64,
    pub joint: f64,
}

impl ChannelLosses {
    pub fn total(&self) -> f64 {
        self.lm + self.itm + self.joint
    }
}

fn require_channels(sv: &ScoreVector) -> Result<()> {
    if !sv.itm_usable {
        return Err(Error::ChannelMissing(
            "image-text matching scores are absent (text-only scores)".into(),
        ));
    }
    Ok(())
}

pub fn channel_losses(sv: &ScoreVector, y: usize, rcfg: &RankingConfig) -> Result<ChannelLosses> {
    require_channels(sv)?;
    let on = |c: Channel, s: &[f64]| -> Result<f64> {
        if rcfg.channels.contains(&c) {
            Ok(rcfg.weights.get(c) * ranking_loss(s, y, rcfg.margin)?)
        } else {
            Ok(0.0)
        }
    };
    Ok(ChannelLosses {
        lm: on(Channel::Lm, &sv.lm)?,
        itm: on(Channel::Itm, &sv.itm)?,
        joint: on(Channel::Joint, &sv.joint)?,
    })
}

/// Sum of the three channel ranking losses, unweighted.
pub fn combined_loss(sv: &ScoreVector, y: usize, margin: f64) -> Result<f64> {
    let rcfg = RankingConfig {
        margin,
        ..RankingConfig::default()
    };
    Ok(channel_losses(sv, y, &rcfg)?.total())
}

/// Upstream gradients of the objective with respect to the LM and ITM
/// scores. The joint score is their mean, so its gradient splits in half.
pub fn score_gradients(
    sv: &ScoreVector,
    y: usize,
    rcfg: &RankingConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    require_channels(sv)?;
    let n = sv.n();
    let w = &rcfg.weights;
    let mut g_lm = vec![0.0; n];
    let mut g_itm = vec![0.0; n];
    if rcfg.channels.contains(&Channel::Lm) {
        g_lm = ranking_loss_grad(&sv.lm, y, rcfg.margin)?;
        g_lm.iter_mut().for_each(|g| *g *= w.lm);
    }
    if rcfg.channels.contains(&Channel::Itm) {
        g_itm = ranking_loss_grad(&sv.itm, y, rcfg.margin)?;
        g_itm.iter_mut().for_each(|g| *g *= w.itm);
    }
    if rcfg.channels.contains(&Channel::Joint) {
        let gj = ranking_loss_grad(&sv.joint, y, rcfg.margin)?;
        for i in 0..n {
            g_lm[i] += 0.5 * w.joint * gj[i];
            g_itm[i] += 0.5 * w.joint * gj[i];
        }
    }
    Ok((g_lm, g_itm))
}

// ---------------------------------------------------------------------------
// Prepared items
// ---------------------------------------------------------------------------

/// A training item with tokens resolved and visual features encoded.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub inputs: Vec<TextInput>,
    pub visual: Arc<VisualFeatures>,
    pub gold: usize,
}

/// Encodes each distinct image once.
pub fn prepare_items(pairs: &[VQAPair], visual: &dyn VisualEncoder) -> Result<Vec<TrainItem>> {
    let mut cache: HashMap<String, Arc<VisualFeatures>> = HashMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        p.qa.validate()?;
        let img = crate::scoring::require_image(p)?;
        let feats = match cache.get(&img.id) {
            Some(f) => f.clone(),
            None => {
                let f = Arc::new(visual.encode(img)?);
                cache.insert(img.id.clone(), f.clone());
                f
            }
        };
        let context = render_question(&p.qa.question, p.caption_prefix.as_deref());
        let inputs: Vec<TextInput> = p
            .qa
            .choices
            .iter()
            .map(|c| TextInput::question_choice(&context, c))
            .collect();
        if let Some(i) = inputs.iter().position(|x| x.scored_len() == 0) {
            return Err(Error::Choice {
                choice: i,
                source: Box::new(Error::invalid(format!("{}: choice has no tokens", p.qa.id))),
            });
        }
        out.push(TrainItem {
            id: p.qa.id.clone(),
            inputs,
            visual: feats,
            gold: p.qa.answer_index,
        });
    }
    Ok(out)
}

/// Scores of every choice of a prepared item under the toy model.
pub fn item_scores(model: &ToyModel, item: &TrainItem, mode: ScoringMode) -> Result<ScoreVector> {
    let mut lm = Vec::with_capacity(item.inputs.len());
    let mut itm = Vec::with_capacity(item.inputs.len());
    for inp in &item.inputs {
        let ids = model.backbone.ids(&inp.tokens);
        lm.push(model.lm_score_ids(&ids, inp.scored_from, mode));
        itm.push(model.itm_score_ids(&ids, mode, &item.visual)?);
    }
    ScoreVector::new(lm, itm)
}

/// Objective value for one item and its gradient, accumulated into `grad`.
pub fn item_loss_and_grad(
    model: &ToyModel,
    item: &TrainItem,
    mode: ScoringMode,
    rcfg: &RankingConfig,
    grad: &mut AdapterState,
) -> Result<ChannelLosses> {
    let sv = item_scores(model, item, mode)?;
    let losses = channel_losses(&sv, item.gold, rcfg)?;
    let (g_lm, g_itm) = score_gradients(&sv, item.gold, rcfg)?;
    for (i, inp) in item.inputs.iter().enumerate() {
        let ids = model.backbone.ids(&inp.tokens);
        if g_lm[i] != 0.0 {
            model.lm_backward(&ids, inp.scored_from, mode, g_lm[i], &mut grad.lm);
        }
        if g_itm[i] != 0.0 {
            model.itm_backward(&ids, mode, &item.visual, g_itm[i], &mut grad.itm)?;
        }
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: ChannelLosses,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub steps: usize,
    pub backbone_checksum: String,
    pub adapter_checksum_before: String,
    pub adapter_checksum_after: String,
}

/// Plain SGD over shuffled mini-batches. Only `model.adapters` changes.
pub fn train(
    model: &mut ToyModel,
    items: &[TrainItem],
    cfg: &TrainConfig,
    rcfg: &RankingConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    rcfg.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let backbone_checksum = model.backbone.checksum();
    let adapter_checksum_before = model.adapters.checksum();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;

    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = seeded_rng(&[b"train-order", &cfg.seed.to_le_bytes(), &(epoch as u64).to_le_bytes()]);
        order.shuffle(&mut rng);
        let mut sum = ChannelLosses::default();
        let mut seen = 0usize;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                if seen > 0 {
                    epochs.push(epoch_report(epoch, sum, seen, epoch_steps));
                }
                break 'outer;
            }
            let mut grad = model.adapters.zeros_like();
            for &k in batch {
                let item = &items[k];
                let l = item_loss_and_grad(model, item, cfg.mode, rcfg, &mut grad)?;
                if !l.total().is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss on item {} (epoch {epoch}, step {steps}): lm={} itm={} joint={}",
                        item.id, l.lm, l.itm, l.joint
                    )));
                }
                sum.lm += l.lm;
                sum.itm += l.itm;
                sum.joint += l.joint;
                seen += 1;
            }
            if !grad.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {steps}"
                )));
            }
            model
                .adapters
                .axpy(-cfg.learning_rate / batch.len() as f64, &grad);
            steps += 1;
            epoch_steps += 1;
        }
        let r = epoch_report(epoch, sum, seen, epoch_steps);
        info!(
            "epoch {epoch}: loss lm={:.4} itm={:.4} joint={:.4}",
            r.mean_loss.lm, r.mean_loss.itm, r.mean_loss.joint
        );
        epochs.push(r);
    }
    debug!("trained {steps} steps");
    Ok(TrainReport {
        epochs,
        steps,
        backbone_checksum,
        adapter_checksum_before,
        adapter_checksum_after: model.adapters.checksum(),
    })
}

fn epoch_report(epoch: usize, sum: ChannelLosses, seen: usize, steps: usize) -> EpochReport {
    let k = seen.max(1) as f64;
    EpochReport {
        epoch,
        mean_loss: ChannelLosses {
            lm: sum.lm / k,
            itm: sum.itm / k,
            joint: sum.joint / k,
        },
        steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranking_hand_cases() {
        assert_eq!(ranking_loss(&[2.0, 0.5, 0.5], 0, 1.0).unwrap(), 0.0);
        let l = ranking_loss(&[0.5, 2.0, 0.2], 0, 1.0).unwrap();
        assert!((l - 3.2 / 3.0).abs() < 1e-12);
        assert!(ranking_loss(&[0.0, 1.0], 2, 1.0).is_err());
        assert!(ranking_loss(&[0.0], 0, 1.0).is_err());
    }

    #[test]
    fn combined_hand_case() {
        let sv = ScoreVector {
            lm: vec![2.0, 0.0, 0.0],
            itm: vec![0.0, 2.0, 0.0],
            joint: vec![1.0, 1.0, 0.0],
            itm_usable: true,
        };
        let l = combined_loss(&sv, 0, 1.0).unwrap();
        assert!((l - 5.0 / 3.0).abs() < 1e-12);
        let v = vec![0.3, -0.2, 0.9];
        let same = ScoreVector {
            lm: v.clone(),
            itm: v.clone(),
            joint: v.clone(),
            itm_usable: true,
        };
        assert!((combined_loss(&same, 1, 1.0).unwrap() - 3.0 * ranking_loss(&v, 1, 1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn text_only_scores_are_rejected() {
        let sv = ScoreVector::text_only(vec![0.0, 1.0]).unwrap();
        assert!(matches!(combined_loss(&sv, 0, 1.0), Err(Error::ChannelMissing(_))));
    }

    #[test]
    fn weights_scale_losses_and_gradients() {
        let sv = ScoreVector::new(vec![0.2, 0.5, 0.1], vec![0.3, 0.0, 0.4]).unwrap();
        let base = RankingConfig::default();
        let weighted = RankingConfig {
            weights: ChannelWeights {
                lm: 2.0,
                itm: 0.0,
                joint: 0.5,
            },
            ..RankingConfig::default()
        };
        let a = channel_losses(&sv, 0, &base).unwrap();
        let b = channel_losses(&sv, 0, &weighted).unwrap();
        assert_eq!((b.lm, b.itm, b.joint), (2.0 * a.lm, 0.0, 0.5 * a.joint));

        let (lm_a, _) = score_gradients(&sv, 0, &RankingConfig { channels: [Channel::Lm].into(), ..base.clone() }).unwrap();
        let (lm_b, itm_b) = score_gradients(
            &sv,
            0,
            &RankingConfig { channels: [Channel::Lm, Channel::Itm].into(), ..weighted.clone() },
        )
        .unwrap();
        assert_eq!(lm_b, lm_a.iter().map(|g| 2.0 * g).collect::<Vec<_>>());
        assert!(itm_b.iter().all(|&g| g == 0.0));

        let bad = RankingConfig {
            channels: [Channel::Itm].into(),
            ..weighted
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kink_has_zero_subgradient() {
        assert_eq!(ranking_loss_grad(&[1.0, 0.0], 0, 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(ranking_loss_grad(&[0.5, 0.0], 0, 1.0).unwrap(), vec![-0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn ranking_loss_properties(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..6),
            y_raw in 0usize..6,
            margin in 0.01f64..3.0,
            shift in -10.0f64..10.0,
        ) {
            let y = y_raw % scores.len();
            let l = ranking_loss(&scores, y, margin).unwrap();
            prop_assert!(l >= 0.0);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            prop_assert!((ranking_loss(&shifted, y, margin).unwrap() - l).abs() < 1e-9);
            let separated = scores.iter().enumerate().all(|(i, s)| i == y || margin - scores[y] + s <= 0.0);
            prop_assert_eq!(l == 0.0, separated);
        }
    }
}
