//! Interfaces for the four external model roles plus deterministic stubs.
//!
//! A text scorer plays the language-model backbone, a visual encoder turns an
//! image into a patch-feature matrix, a text-to-image generator "imagines"
//! an image for a question, and a captioner describes an image in words.
//! The stubs make every pipeline stage runnable without pretrained weights;
//! [`toy::ToyModel`] is the small trainable text scorer used for training
//! and gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scoring::Projection;

pub mod store;
pub mod stub;
pub mod toy;

pub use store::{ImageStore, SceneMeta};
pub use stub::{
    stub_caption, stub_encode_image, stub_encode_text, stub_generate_image, StubCaptioner,
    StubGenerator, StubJointEmbedder, StubTextScorer, StubVisualEncoder,
};
pub use toy::{ToyBackbone, ToyConfig, ToyModel, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    TextScorer,
    VisualEncoder,
    T2iGenerator,
    Captioner,
}

impl BackendKind {
    pub const ALL: [BackendKind; 4] = [
        BackendKind::TextScorer,
        BackendKind::VisualEncoder,
        BackendKind::T2iGenerator,
        BackendKind::Captioner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::TextScorer => "text_scorer",
            BackendKind::VisualEncoder => "visual_encoder",
            BackendKind::T2iGenerator => "t2i_generator",
            BackendKind::Captioner => "captioner",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackendKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown backend kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Real(f64),
}

impl Scalar {
    pub fn as_i64(self) -> Option<i64> {
        match self {
            Scalar::Int(v) => Some(v),
            Scalar::Real(_) => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Scalar::Int(v) => v as f64,
            Scalar::Real(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub name: String,
    #[serde(default)]
    pub config: BTreeMap<String, Scalar>,
}

impl BackendDescriptor {
    pub fn new(kind: BackendKind, name: impl Into<String>) -> Self {
        Self {
            kind,
            name: name.into(),
            config: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: i64) -> Self {
        self.config.insert(key.to_string(), Scalar::Int(value));
        self
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        self.config.get(key).and_then(|s| s.as_i64())
    }

    pub fn int_or(&self, key: &str, default: i64) -> i64 {
        self.int(key).unwrap_or(default)
    }

    pub fn seed(&self) -> u64 {
        self.int_or("seed", 0) as u64
    }

    /// Checks the positivity invariants on the dimension-like keys.
    pub fn validate(&self) -> Result<()> {
        for key in ["feature_dim", "resolution", "inference_steps", "grid_rows", "grid_cols"] {
            if let Some(v) = self.config.get(key) {
                if v.as_f64() <= 0.0 {
                    return Err(Error::invalid(format!(
                        "{} `{}`: {key} must be > 0",
                        self.kind, self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Encoder-style: each scored token is predicted with every other token visible.
    #[default]
    Masked,
    /// Decoder-style: each scored token is predicted from its prefix.
    Autoregressive,
}

impl ScoringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMode::Masked => "masked",
            ScoringMode::Autoregressive => "autoregressive",
        }
    }
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(ScoringMode::Masked),
            "autoregressive" | "ar" => Ok(ScoringMode::Autoregressive),
            _ => Err(Error::invalid(format!("unknown scoring mode `{s}`"))),
        }
    }
}

/// A token sequence plus the index where the scored span starts.
///
/// For multiple-choice scoring the context is the (caption-prefixed)
/// question and the scored span is the answer choice.
#[derive(Debug, Clone, PartialEq)]
pub struct TextInput {
    pub tokens: Vec<String>,
    pub scored_from: usize,
}

impl TextInput {
    /// Every token is scored.
    pub fn whole(tokens: Vec<String>) -> Self {
        Self {
            tokens,
            scored_from: 0,
        }
    }

    pub fn question_choice(context: &str, choice: &str) -> Self {
        let mut tokens = crate::text::tokenize(context);
        let scored_from = tokens.len();
        tokens.extend(crate::text::tokenize(choice));
        Self {
            tokens,
            scored_from,
        }
    }

    pub fn scored_len(&self) -> usize {
        self.tokens.len().saturating_sub(self.scored_from)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub context_vector: Vec<f64>,
    pub token_log_probs: Vec<f64>,
    pub scoring_mode: ScoringMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub patches: Matrix,
    pub grid_shape: (usize, usize),
}

impl VisualFeatures {
    pub fn new(patches: Matrix, grid_shape: (usize, usize)) -> Result<Self> {
        if patches.rows == 0 {
            return Err(Error::invalid("visual features need at least one patch"));
        }
        if grid_shape.0 * grid_shape.1 != patches.rows {
            return Err(Error::Dimension(format!(
                "grid {}x{} does not match {} patches",
                grid_shape.0, grid_shape.1, patches.rows
            )));
        }
        if !patches.is_finite() {
            return Err(Error::Numerical("non-finite patch feature".into()));
        }
        Ok(Self {
            patches,
            grid_shape,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows
    }

    pub fn dim(&self) -> usize {
        self.patches.cols
    }

    /// Reorders patch rows; `perm[i]` is the source row of output row `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| self.patches.row(i).to_vec()).collect();
        Self {
            patches: Matrix::from_rows(&rows),
            grid_shape: (1, perm.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub path: PathBuf,
    pub resolution: u32,
    pub generator: String,
    pub prompt_hash: String,
}

impl ImageRef {
    pub fn ensure_resolvable(&self) -> Result<&Path> {
        if self.path.is_file() {
            Ok(&self.path)
        } else {
            Err(Error::MissingImage(format!(
                "{} ({})",
                self.id,
                self.path.display()
            )))
        }
    }

    /// Reference for an image that already exists on disk.
    ///
    /// Images written by an [`ImageStore`] carry a metadata sidecar that
    /// restores the original reference. Anything else is content-addressed
    /// by its bytes.
    pub fn from_path(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingImage(path.display().to_string()));
        }
        if let Some(meta) = SceneMeta::read_sidecar(path)? {
            return Ok(ImageRef {
                id: meta.id,
                path: path.to_path_buf(),
                resolution: meta.resolution,
                generator: meta.generator,
                prompt_hash: meta.prompt_hash,
            });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
        let (w, _) = image::ImageReader::new(std::io::Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| Error::storage(path, e))?
            .into_dimensions()
            .map_err(|e| Error::MissingImage(format!("{}: {e}", path.display())))?;
        let digest = crate::text::digest_hex(&bytes);
        Ok(ImageRef {
            id: digest[..16].to_string(),
            path: path.to_path_buf(),
            resolution: w,
            generator: "external".into(),
            prompt_hash: digest,
        })
    }
}

pub trait TextScorer: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Dimension of the context vector.
    fn feature_dim(&self) -> usize;

    fn encode(&self, input: &TextInput, mode: ScoringMode) -> Result<TextFeatures>;

    /// The visual-to-text bridge used by image-text matching, when the
    /// scorer owns one.
    fn itm_projection(&self) -> Option<&Projection> {
        None
    }
}

pub trait VisualEncoder: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn feature_dim(&self) -> usize;
    fn encode(&self, image: &ImageRef) -> Result<VisualFeatures>;
}

pub trait ImageGenerator: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Renders `prompt` into `store` and returns the stored reference.
    fn generate(
        &self,
        prompt: &str,
        resolution: u32,
        steps: u32,
        store: &ImageStore,
    ) -> Result<ImageRef>;
}

pub trait Captioner: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn caption(&self, image: &ImageRef) -> Result<String>;
}

/// Joint text/image embedding model used for relevance validation.
pub trait JointEmbedder: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>>;
}

/// Parses a `kind=name` backend selection.
pub fn parse_selection(spec: &str) -> Result<(BackendKind, String)> {
    let (kind, name) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("backend selection `{spec}` is not kind=name")))?;
    let name = name.trim();
    if name.is_empty() {
        return Err(Error::invalid(format!("backend selection `{spec}` has no name")));
    }
    Ok((kind.trim().parse()?, name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_parsing() {
        assert_eq!(
            parse_selection("text_scorer=toy").unwrap(),
            (BackendKind::TextScorer, "toy".to_string())
        );
        assert!(parse_selection("text_scorer").is_err());
        assert!(parse_selection("painter=stub").is_err());
        assert!(parse_selection("captioner=").is_err());
    }

    #[test]
    fn descriptor_rejects_nonpositive_dims() {
        let d = BackendDescriptor::new(BackendKind::VisualEncoder, "stub").with("feature_dim", 0);
        assert!(d.validate().is_err());
        let d = BackendDescriptor::new(BackendKind::VisualEncoder, "stub").with("feature_dim", 8);
        assert!(d.validate().is_ok());
    }

    #[test]
    fn visual_features_check_grid() {
        let m = Matrix::zeros(4, 3);
        assert!(VisualFeatures::new(m.clone(), (2, 2)).is_ok());
        assert!(matches!(
            VisualFeatures::new(m, (3, 2)),
            Err(Error::Dimension(_))
        ));
        assert!(VisualFeatures::new(Matrix::zeros(0, 3), (0, 1)).is_err());
    }

    #[test]
    fn question_choice_split() {
        let input = TextInput::question_choice("Where is it?", "in the box");
        assert_eq!(input.scored_from, 3);
        assert_eq!(input.scored_len(), 3);
    }
}
