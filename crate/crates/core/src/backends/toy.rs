//! A small trainable text scorer with a frozen random backbone.
//!
//! The backbone is an embedding table and an output matrix. The hidden
//! state for a scored position is a mean of the visible embeddings (all
//! other positions when masked, a recency-weighted prefix when
//! autoregressive), the LM adapter edits that state, and the output matrix
//! turns it into next-token logits. The context vector used for image-text
//! matching is the mean embedding of the whole sequence passed through the
//! ITM adapter. Everything fits in under 5,000 parameters so finite
//! difference checks are quick.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendDescriptor, BackendKind, ScoringMode, TextFeatures, TextInput, TextScorer,
    VisualFeatures,
};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::scoring::{contextualize, cosine, Projection};
use crate::text::{digest_parts, seeded_rng};
use crate::training::adapters::{
    tensor_checksum, AdapterState, ItmAdapter, ParallelAdapter, DEFAULT_REDUCTION_FACTOR,
};

/// Words with their own embedding row in the default vocabulary.
pub const DEFAULT_WORDS: &[&str] = &[
    // objects
    "apple", "ball", "cat", "dog", "car", "tree", "boat", "fish",
    // attributes and actions
    "red", "round", "meow", "bark", "drive", "leaf", "sail", "swim",
    // function words
    "what", "is", "the", "a", "in", "picture", "shown", "image", "thing", "this", "which", "one",
    "goes", "with", "here", "it",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub dim: usize,
    pub visual_dim: usize,
    pub reduction_factor: usize,
    pub oov_buckets: usize,
    /// Weight decay per step back in the autoregressive prefix mean.
    pub ar_decay: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            visual_dim: 16,
            reduction_factor: DEFAULT_REDUCTION_FACTOR,
            oov_buckets: 16,
            ar_decay: 0.8,
            seed: 0,
        }
    }
}

/// Known words plus hashed buckets for everything else.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    oov_buckets: usize,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S], oov_buckets: usize) -> Result<Self> {
        if oov_buckets == 0 {
            return Err(Error::invalid("vocabulary needs at least one OOV bucket"));
        }
        let words: Vec<String> = words.iter().map(|w| w.as_ref().to_lowercase()).collect();
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self {
            words,
            index,
            oov_buckets,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len() + self.oov_buckets
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) => i,
            None => {
                let h = digest_parts(&[b"oov", token.as_bytes()]);
                let b = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
                self.words.len() + (b % self.oov_buckets as u64) as usize
            }
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(DEFAULT_WORDS, ToyConfig::default().oov_buckets).expect("distinct defaults")
    }
}

/// Frozen parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub config: ToyConfig,
    pub vocab: Vocabulary,
    /// `vocab x dim`
    pub embeddings: Matrix,
    /// `vocab x dim`
    pub output: Matrix,
}

impl ToyBackbone {
    pub fn new(config: ToyConfig, vocab: Vocabulary) -> Result<Self> {
        if config.dim == 0 || config.visual_dim == 0 {
            return Err(Error::invalid("toy dims must be > 0"));
        }
        if vocab.oov_buckets != config.oov_buckets {
            return Err(Error::invalid("vocabulary OOV buckets disagree with config"));
        }
        let (v, d) = (vocab.len(), config.dim);
        let mut rng = seeded_rng(&[b"toy-backbone", &config.seed.to_le_bytes()]);
        let s = 1.0 / (d as f64).sqrt();
        let mut gauss = |scale: f64| -> Vec<f64> {
            (0..v * d)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let embeddings = Matrix {
            rows: v,
            cols: d,
            data: gauss(1.0),
        };
        let output = Matrix {
            rows: v,
            cols: d,
            data: gauss(s),
        };
        Ok(Self {
            config,
            vocab,
            embeddings,
            output,
        })
    }

    pub fn param_count(&self) -> usize {
        self.embeddings.data.len() + self.output.data.len()
    }

    /// Hex SHA-256 over every frozen parameter's bits.
    pub fn checksum(&self) -> String {
        tensor_checksum(
            [
                ("backbone.embeddings", self.embeddings.data.as_slice()),
                ("backbone.output", self.output.data.as_slice()),
            ]
            .into_iter(),
        )
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    /// Weighted mean of the embeddings at `positions`.
    fn weighted_mean(&self, ids: &[usize], weights: impl Iterator<Item = (usize, f64)>) -> Vec<f64> {
        let mut out = vec![0.0; self.config.dim];
        let mut total = 0.0;
        for (pos, w) in weights {
            axpy(w, self.embeddings.row(ids[pos]), &mut out);
            total += w;
        }
        if total > 0.0 {
            out.iter_mut().for_each(|v| *v /= total);
        }
        out
    }

    /// Hidden state used to predict position `t`.
    pub fn hidden(&self, ids: &[usize], t: usize, mode: ScoringMode) -> Vec<f64> {
        match mode {
            ScoringMode::Masked => {
                self.weighted_mean(ids, (0..ids.len()).filter(|&s| s != t).map(|s| (s, 1.0)))
            }
            ScoringMode::Autoregressive => {
                let g = self.config.ar_decay;
                self.weighted_mean(ids, (0..t).map(|s| (s, g.powi((t - 1 - s) as i32))))
            }
        }
    }

    /// Sequence summary before the ITM adapter.
    pub fn summary(&self, ids: &[usize], mode: ScoringMode) -> Vec<f64> {
        let m = ids.len();
        match mode {
            ScoringMode::Masked => self.weighted_mean(ids, (0..m).map(|s| (s, 1.0))),
            ScoringMode::Autoregressive => {
                let g = self.config.ar_decay;
                self.weighted_mean(ids, (0..m).map(|s| (s, g.powi((m - 1 - s) as i32))))
            }
        }
    }
}

/// Log-softmax of `logits` at `target`, plus the softmax.
fn log_softmax_at(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let lp = (logits[target] - max) - z.ln();
    (lp.min(0.0), exps.into_iter().map(|e| e / z).collect())
}

/// Backbone plus adapters.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub backbone: ToyBackbone,
    pub adapters: AdapterState,
    descriptor: BackendDescriptor,
}

impl ToyModel {
    pub fn new(config: ToyConfig, vocab: Vocabulary) -> Result<Self> {
        let adapters =
            AdapterState::new(config.dim, config.visual_dim, config.reduction_factor, config.seed);
        let backbone = ToyBackbone::new(config, vocab)?;
        Self::from_parts(backbone, adapters)
    }

    pub fn from_parts(backbone: ToyBackbone, adapters: AdapterState) -> Result<Self> {
        let c = &backbone.config;
        let p = &adapters.itm.projection;
        if adapters.lm.dim() != c.dim || adapters.itm.adapter.dim() != c.dim {
            return Err(Error::Dimension("adapter dim differs from backbone dim".into()));
        }
        if p.in_dim() != c.visual_dim || p.out_dim() != c.dim {
            return Err(Error::Dimension("projection shape differs from config".into()));
        }
        let descriptor = BackendDescriptor::new(BackendKind::TextScorer, "toy")
            .with("feature_dim", c.dim as i64)
            .with("visual_dim", c.visual_dim as i64)
            .with("reduction_factor", c.reduction_factor as i64)
            .with("seed", c.seed as i64);
        Ok(Self {
            backbone,
            adapters,
            descriptor,
        })
    }

    pub fn default_with_seed(seed: u64) -> Self {
        let config = ToyConfig {
            seed,
            ..ToyConfig::default()
        };
        Self::new(config, Vocabulary::default()).expect("valid defaults")
    }

    pub fn config(&self) -> &ToyConfig {
        &self.backbone.config
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.adapters.param_count()
    }

    fn check_input(&self, input: &TextInput) -> Result<Vec<usize>> {
        if input.tokens.is_empty() {
            return Err(Error::invalid("empty text"));
        }
        if input.scored_len() == 0 {
            return Err(Error::invalid("no scoreable tokens"));
        }
        Ok(self.backbone.ids(&input.tokens))
    }

    /// Log-probability of every scored token.
    pub fn token_log_probs(&self, ids: &[usize], scored_from: usize, mode: ScoringMode) -> Vec<f64> {
        (scored_from..ids.len())
            .map(|t| {
                let h = self.backbone.hidden(ids, t, mode);
                let (hp, _) = self.adapters.lm.forward(&h);
                log_softmax_at(&self.backbone.output.matvec(&hp), ids[t]).0
            })
            .collect()
    }

    /// Mean log-likelihood of the scored span.
    pub fn lm_score_ids(&self, ids: &[usize], scored_from: usize, mode: ScoringMode) -> f64 {
        let lps = self.token_log_probs(ids, scored_from, mode);
        lps.iter().sum::<f64>() / lps.len() as f64
    }

    /// Accumulates `upstream · ∂S_LM/∂θ` into the LM adapter gradient.
    pub fn lm_backward(
        &self,
        ids: &[usize],
        scored_from: usize,
        mode: ScoringMode,
        upstream: f64,
        grad: &mut ParallelAdapter,
    ) {
        let m = (ids.len() - scored_from) as f64;
        let w = &self.backbone.output;
        for t in scored_from..ids.len() {
            let h = self.backbone.hidden(ids, t, mode);
            let (hp, z) = self.adapters.lm.forward(&h);
            let (_, probs) = log_softmax_at(&w.matvec(&hp), ids[t]);
            // d log p_target / d logits = onehot - softmax
            let mut dlogits: Vec<f64> = probs.iter().map(|p| -p * upstream / m).collect();
            dlogits[ids[t]] += upstream / m;
            let g = w.t_matvec(&dlogits);
            self.adapters.lm.backward(&h, &z, &g, grad);
        }
    }

    /// Context vector after the ITM adapter.
    pub fn context_vector(&self, ids: &[usize], mode: ScoringMode) -> Vec<f64> {
        self.adapters.itm.adapter.forward(&self.backbone.summary(ids, mode)).0
    }

    /// ITM score of a token sequence against visual features; 0 when the
    /// contextualized visual vector vanishes.
    pub fn itm_score_ids(&self, ids: &[usize], mode: ScoringMode, v: &VisualFeatures) -> Result<f64> {
        let t = self.context_vector(ids, mode);
        if norm(&t) == 0.0 {
            return Err(Error::invalid("text context vector has zero norm"));
        }
        let ctx = contextualize(&t, v, Some(&self.adapters.itm.projection))?;
        Ok(cosine(&t, &ctx.context).unwrap_or(0.0))
    }

    /// Accumulates `upstream · ∂S_ITM/∂θ` into the ITM adapter gradient.
    pub fn itm_backward(
        &self,
        ids: &[usize],
        mode: ScoringMode,
        v: &VisualFeatures,
        upstream: f64,
        grad: &mut ItmAdapter,
    ) -> Result<()> {
        let t0 = self.backbone.summary(ids, mode);
        let (t, z) = self.adapters.itm.adapter.forward(&t0);
        let ctx = contextualize(&t, v, Some(&self.adapters.itm.projection))?;
        let c = &ctx.context;
        let (nt, nc) = (norm(&t), norm(c));
        if nt == 0.0 || nc == 0.0 {
            return Ok(());
        }
        let s = dot(&t, c) / (nt * nc);
        // ∂cos/∂t and ∂cos/∂c
        let mut g_t: Vec<f64> = t
            .iter()
            .zip(c)
            .map(|(ti, ci)| upstream * (ci / (nt * nc) - s * ti / (nt * nt)))
            .collect();
        let g_c: Vec<f64> = t
            .iter()
            .zip(c)
            .map(|(ti, ci)| upstream * (ti / (nt * nc) - s * ci / (nc * nc)))
            .collect();

        // c = Σ α_i q_i, α = softmax(<t, q_i>/√d)
        let q = &ctx.projected;
        let alpha = &ctx.attention.weights;
        let inv_sqrt_d = 1.0 / (t.len() as f64).sqrt();
        let dalpha: Vec<f64> = (0..q.rows).map(|i| dot(&g_c, q.row(i))).collect();
        let mean_dalpha: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let proj = &mut grad.projection;
        for i in 0..q.rows {
            let dlogit = alpha[i] * (dalpha[i] - mean_dalpha);
            axpy(dlogit * inv_sqrt_d, q.row(i), &mut g_t);
            // ∂/∂q_i = α_i g_c + dlogit t/√d
            let mut dq = crate::linalg::scale(alpha[i], &g_c);
            axpy(dlogit * inv_sqrt_d, &t, &mut dq);
            proj.weight.add_outer(1.0, &dq, v.patches.row(i));
            axpy(1.0, &dq, &mut proj.bias);
        }
        self.adapters.itm.adapter.backward(&t0, &z, &g_t, &mut grad.adapter);
        Ok(())
    }
}

impl TextScorer for ToyModel {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn feature_dim(&self) -> usize {
        self.backbone.config.dim
    }

    fn encode(&self, input: &TextInput, mode: ScoringMode) -> Result<TextFeatures> {
        let ids = self.check_input(input)?;
        Ok(TextFeatures {
            context_vector: self.context_vector(&ids, mode),
            token_log_probs: self.token_log_probs(&ids, input.scored_from, mode),
            scoring_mode: mode,
        })
    }

    fn itm_projection(&self) -> Option<&Projection> {
        Some(&self.adapters.itm.projection)
    }
}
