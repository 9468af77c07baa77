//! Finite-difference verification of the hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::backends::{ScoringMode, ToyModel};
use crate::error::{Error, Result};

use super::{channel_losses, item_loss_and_grad, item_scores, RankingConfig, TrainItem};

/// Gradients at or below this magnitude are not compared.
pub const MIN_CHECKED_GRADIENT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: Option<String>,
    pub checked: usize,
    pub skipped_small: usize,
    /// `(|analytic|, relative error)` for every checked parameter.
    pub errors: Vec<(f64, f64)>,
}

impl GradCheckReport {
    /// Worst relative error among parameters whose analytic gradient is at
    /// least `min_abs` in magnitude.
    pub fn max_relative_error_above(&self, min_abs: f64) -> f64 {
        self.errors
            .iter()
            .filter(|(g, _)| *g >= min_abs)
            .map(|&(_, r)| r)
            .fold(0.0, f64::max)
    }
}

/// Distance of the closest hinge argument from its kink, over the active
/// channels. Items where this is tiny are not differentiable in practice.
pub fn kink_distance(model: &ToyModel, item: &TrainItem, mode: ScoringMode, rcfg: &RankingConfig) -> Result<f64> {
    let sv = item_scores(model, item, mode)?;
    let mut best = f64::INFINITY;
    for (c, s) in [
        (super::Channel::Lm, &sv.lm),
        (super::Channel::Itm, &sv.itm),
        (super::Channel::Joint, &sv.joint),
    ] {
        if !rcfg.channels.contains(&c) {
            continue;
        }
        for (i, si) in s.iter().enumerate() {
            if i != item.gold {
                best = best.min((rcfg.margin - s[item.gold] + si).abs());
            }
        }
    }
    Ok(best)
}

fn objective(model: &ToyModel, item: &TrainItem, mode: ScoringMode, rcfg: &RankingConfig) -> Result<f64> {
    let sv = item_scores(model, item, mode)?;
    Ok(channel_losses(&sv, item.gold, rcfg)?.total())
}

fn param_slot(model: &mut ToyModel, mut k: usize) -> (String, &mut f64) {
    for (name, t) in model.adapters.tensors_mut() {
        if k < t.len() {
            return (format!("{name}[{k}]"), &mut t[k]);
        }
        k -= t.len();
    }
    unreachable!("flat index within parameter count")
}

/// Compares the analytic adapter gradient of the combined objective with
/// central differences of step `eps`, parameter by parameter.
///
/// With `richardson`, each difference is extrapolated from steps `eps` and
/// `eps/2`, which cancels the leading truncation term.
pub fn gradient_check(
    model: &ToyModel,
    item: &TrainItem,
    eps: f64,
    mode: ScoringMode,
    rcfg: &RankingConfig,
    richardson: bool,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid("eps must lie in [1e-6, 1e-3]"));
    }
    let mut grad = model.adapters.zeros_like();
    item_loss_and_grad(model, item, mode, rcfg, &mut grad)?;
    let analytic = grad.flat();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite analytic gradient".into()));
    }

    let mut probe = model.clone();
    let mut central = |k: usize, h: f64| -> Result<f64> {
        let orig = *param_slot(&mut probe, k).1;
        *param_slot(&mut probe, k).1 = orig + h;
        let up = objective(&probe, item, mode, rcfg)?;
        *param_slot(&mut probe, k).1 = orig - h;
        let down = objective(&probe, item, mode, rcfg)?;
        *param_slot(&mut probe, k).1 = orig;
        Ok((up - down) / (2.0 * h))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: None,
        checked: 0,
        skipped_small: 0,
        errors: Vec::new(),
    };
    for (k, &a) in analytic.iter().enumerate() {
        if a.abs() <= MIN_CHECKED_GRADIENT {
            report.skipped_small += 1;
            continue;
        }
        let numeric = if richardson {
            (4.0 * central(k, eps / 2.0)? - central(k, eps)?) / 3.0
        } else {
            central(k, eps)?
        };
        if !numeric.is_finite() {
            return Err(Error::Numerical("non-finite finite difference".into()));
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        report.checked += 1;
        report.errors.push((a.abs(), rel));
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_parameter = Some(param_slot(&mut model.clone(), k).0);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ImageStore, SceneMeta, StubVisualEncoder, ToyConfig, Vocabulary};
    use crate::dataset::{PairSource, QAPair, VQAPair};
    use crate::training::prepare_items;

    fn items(store: &ImageStore) -> Vec<TrainItem> {
        let specs = [
            ("which thing goes with red", ["apple", "boat", "cat"], 0, vec!["apple"]),
            ("what is shown in the picture", ["dog", "tree", "fish"], 2, vec!["fish", "fish"]),
            ("which one goes with bark here", ["car", "dog", "ball"], 1, vec![]),
            ("what is in this image", ["ball", "cat", "boat"], 1, vec!["cat"]),
        ];
        let pairs: Vec<VQAPair> = specs
            .iter()
            .enumerate()
            .map(|(k, (q, choices, gold, concepts))| {
                let meta = SceneMeta::new(
                    &format!("gc-{k}"),
                    concepts.iter().map(|c| c.to_string()).collect(),
                    "test",
                    64,
                    1,
                    k as u64,
                );
                VQAPair {
                    qa: QAPair {
                        id: format!("gc-{k}"),
                        question: q.to_string(),
                        choices: choices.iter().map(|c| c.to_string()).collect(),
                        answer_index: *gold,
                        source: PairSource::SyntheticKb,
                    },
                    image: Some(store.write_scene(&meta).unwrap()),
                    caption_prefix: None,
                }
            })
            .collect();
        prepare_items(&pairs, &StubVisualEncoder::default()).unwrap()
    }

    #[test]
    fn gradients_above_roundoff_agree() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let config = ToyConfig {
            reduction_factor: 4,
            ..ToyConfig::default()
        };
        let model = ToyModel::new(config, Vocabulary::default()).unwrap();
        let rcfg = RankingConfig::default();
        let mut checked = 0;
        for mode in [ScoringMode::Masked, ScoringMode::Autoregressive] {
            for it in &items(&store) {
                if kink_distance(&model, it, mode, &rcfg).unwrap() < 1e-4 {
                    continue;
                }
                let r = gradient_check(&model, it, 1e-5, mode, &rcfg, false).unwrap();
                assert!(r.max_relative_error_above(1e-3) <= 1e-6, "{}: {r:?}", it.id);
                assert_eq!(r.errors.len(), r.checked);
                checked += r.checked;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn step_size_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let model = ToyModel::default_with_seed(0);
        let it = &items(&store)[0];
        let rcfg = RankingConfig::default();
        assert!(gradient_check(&model, it, 1e-1, ScoringMode::Masked, &rcfg, false).is_err());
        assert!(gradient_check(&model, it, 1e-9, ScoringMode::Masked, &rcfg, false).is_err());
    }
}
