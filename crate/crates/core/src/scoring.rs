//! Per-choice language-model, image-text matching and joint scores.
//!
//! Every score follows one convention: higher is better. The LM score is the
//! mean token log-likelihood of the answer span, so a sequence whose tokens
//! all have probability one scores exactly zero.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backends::{ImageRef, ScoringMode, TextInput, TextScorer, VisualEncoder, VisualFeatures};
use crate::dataset::VQAPair;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::text::seeded_rng;

/// Affine bridge from visual feature space into text feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `out_dim x in_dim`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Projection {
    pub fn identity(dim: usize) -> Self {
        let mut weight = Matrix::zeros(dim, dim);
        for i in 0..dim {
            weight.row_mut(i)[i] = 1.0;
        }
        Self {
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Random Gaussian map with unit-variance outputs for unit-variance inputs.
    pub fn seeded(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(&[b"projection", &seed.to_le_bytes()]);
        let s = 1.0 / (in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight: Matrix {
                rows: out_dim,
                cols: in_dim,
                data,
            },
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        axpy(1.0, &self.bias, &mut y);
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub weights: Vec<f64>,
    pub grid_shape: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contextualized {
    pub context: Vec<f64>,
    pub attention: AttentionMap,
    /// Patches after projection into text space, one row per patch.
    pub projected: Matrix,
}

/// Mean log-likelihood of the scored tokens.
pub fn mean_log_likelihood(token_log_probs: &[f64]) -> Result<f64> {
    if token_log_probs.is_empty() {
        return Err(Error::invalid("no scoreable tokens"));
    }
    Ok(token_log_probs.iter().sum::<f64>() / token_log_probs.len() as f64)
}

pub fn lm_score(input: &TextInput, backend: &dyn TextScorer, mode: ScoringMode) -> Result<f64> {
    if input.scored_len() == 0 {
        return Err(Error::invalid("no scoreable tokens"));
    }
    mean_log_likelihood(&backend.encode(input, mode)?.token_log_probs)
}

/// Attention of a text vector over image patches and the resulting
/// attention-weighted visual context.
///
/// Logits are `<t, project(patch_i)> / sqrt(d)` with `d` the projected
/// (text) dimension. Without a projection the visual and text dimensions
/// must agree.
pub fn contextualize(
    t_vec: &[f64],
    v: &VisualFeatures,
    projection: Option<&Projection>,
) -> Result<Contextualized> {
    let d = t_vec.len();
    let projected = match projection {
        Some(p) => {
            if p.in_dim() != v.dim() || p.out_dim() != d {
                return Err(Error::Dimension(format!(
                    "projection {}->{} cannot bridge visual {} to text {}",
                    p.in_dim(),
                    p.out_dim(),
                    v.dim(),
                    d
                )));
            }
            let rows: Vec<Vec<f64>> = (0..v.num_patches())
                .map(|i| p.apply(v.patches.row(i)))
                .collect();
            Matrix::from_rows(&rows)
        }
        None if v.dim() == d => v.patches.clone(),
        None => {
            return Err(Error::Dimension(format!(
                "visual dim {} differs from text dim {d} and no projection is defined",
                v.dim()
            )))
        }
    };
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = (0..projected.rows)
        .map(|i| dot(t_vec, projected.row(i)) * inv_sqrt_d)
        .collect();
    let weights = softmax_unchecked(&logits);
    let mut context = vec![0.0; d];
    for (i, &w) in weights.iter().enumerate() {
        axpy(w, projected.row(i), &mut context);
    }
    Ok(Contextualized {
        context,
        attention: AttentionMap {
            weights,
            grid_shape: v.grid_shape,
        },
        projected,
    })
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cosine similarity; `None` when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItmScore {
    pub value: f64,
    /// Set when the contextualized visual vector had zero norm.
    pub degenerate: bool,
}

pub fn itm_score(
    t_vec: &[f64],
    v: &VisualFeatures,
    projection: Option<&Projection>,
) -> Result<ItmScore> {
    if norm(t_vec) == 0.0 {
        return Err(Error::invalid("text context vector has zero norm"));
    }
    let ctx = contextualize(t_vec, v, projection)?;
    Ok(match cosine(t_vec, &ctx.context) {
        Some(value) => ItmScore {
            value,
            degenerate: false,
        },
        None => ItmScore {
            value: 0.0,
            degenerate: true,
        },
    })
}

pub fn joint_score(lm: f64, itm: f64) -> f64 {
    0.5 * (lm + itm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub lm: Vec<f64>,
    pub itm: Vec<f64>,
    pub joint: Vec<f64>,
    /// False in text-only mode, where `itm` is zero-filled.
    pub itm_usable: bool,
}

impl ScoreVector {
    pub fn new(lm: Vec<f64>, itm: Vec<f64>) -> Result<Self> {
        if lm.len() != itm.len() {
            return Err(Error::invalid("lm and itm lengths differ"));
        }
        let joint = lm.iter().zip(&itm).map(|(&l, &i)| joint_score(l, i)).collect();
        let sv = Self {
            lm,
            itm,
            joint,
            itm_usable: true,
        };
        sv.validate()?;
        Ok(sv)
    }

    pub fn text_only(lm: Vec<f64>) -> Result<Self> {
        let n = lm.len();
        let mut sv = Self::new(lm, vec![0.0; n])?;
        sv.itm_usable = false;
        Ok(sv)
    }

    pub fn n(&self) -> usize {
        self.lm.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lm.len();
        if self.itm.len() != n || self.joint.len() != n {
            return Err(Error::invalid("score arrays differ in length"));
        }
        let all = self.lm.iter().chain(&self.itm).chain(&self.joint);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite score".into()));
        }
        Ok(())
    }
}

/// Backends needed to score one item.
#[derive(Clone, Copy)]
pub struct ScoringContext<'a> {
    pub text: &'a dyn TextScorer,
    /// `None` scores in text-only mode.
    pub visual: Option<&'a dyn VisualEncoder>,
    pub mode: ScoringMode,
}

/// Question text as the language model sees it, caption first when present.
pub fn render_question(question: &str, caption_prefix: Option<&str>) -> String {
    match caption_prefix {
        Some(c) if !c.is_empty() => format!("{c} {question}"),
        _ => question.to_string(),
    }
}

pub fn score_choices(pair: &VQAPair, ctx: &ScoringContext<'_>) -> Result<ScoreVector> {
    let context = render_question(&pair.qa.question, pair.caption_prefix.as_deref());
    let visual = match (ctx.visual, pair.image.as_ref()) {
        (Some(enc), Some(img)) => Some(enc.encode(img)?),
        _ => None,
    };
    score_with_features(&context, &pair.qa.choices, visual.as_ref(), ctx)
}

/// Scores choices against already-encoded visual features.
pub fn score_with_features(
    context: &str,
    choices: &[String],
    visual: Option<&VisualFeatures>,
    ctx: &ScoringContext<'_>,
) -> Result<ScoreVector> {
    let mut lm = Vec::with_capacity(choices.len());
    let mut itm = Vec::with_capacity(choices.len());
    for (i, choice) in choices.iter().enumerate() {
        let wrap = |e: Error| Error::Choice {
            choice: i,
            source: Box::new(e),
        };
        let input = TextInput::question_choice(context, choice);
        if input.scored_len() == 0 {
            return Err(wrap(Error::invalid("choice has no scoreable tokens")));
        }
        let feats = ctx.text.encode(&input, ctx.mode).map_err(wrap)?;
        lm.push(mean_log_likelihood(&feats.token_log_probs).map_err(wrap)?);
        if let Some(v) = visual {
            let s = itm_score(&feats.context_vector, v, ctx.text.itm_projection()).map_err(wrap)?;
            itm.push(s.value);
        }
    }
    if visual.is_some() {
        ScoreVector::new(lm, itm)
    } else {
        ScoreVector::text_only(lm)
    }
}

/// Convenience: image reference of a pair, erroring if absent.
pub fn require_image(pair: &VQAPair) -> Result<&ImageRef> {
    pair.image
        .as_ref()
        .ok_or_else(|| Error::MissingImage(format!("pair {} has no image", pair.qa.id)))
}
