//! Deterministic stand-ins for the pretrained models.
//!
//! All outputs are pure functions of the declared inputs, driven by SHA-256
//! seeded ChaCha streams. Visual features are tied to a fixed "world" of
//! concept vectors: a stub image depicting `dog` has patches near the `dog`
//! concept vector regardless of encoder seed, which gives image-text
//! matching something real to learn.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::backends::store::{concept_at, SceneMeta};
use crate::backends::{
    BackendDescriptor, BackendKind, Captioner, ImageGenerator, ImageRef, ImageStore,
    JointEmbedder, ScoringMode, TextFeatures, TextInput, TextScorer, VisualEncoder,
    VisualFeatures,
};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::scoring::Projection;
use crate::text::{content_words, digest_parts, seeded_rng, unit_from_hash};

pub const DEFAULT_TEXT_DIM: usize = 32;
pub const DEFAULT_VISUAL_DIM: usize = 16;
pub const DEFAULT_GRID: (usize, usize) = (14, 14);
pub const DEFAULT_TRAIN_RESOLUTION: u32 = 384;
pub const DEFAULT_EVAL_RESOLUTION: u32 = 512;
pub const DEFAULT_STEPS: u32 = 50;
/// Most negative log-probability the stub text scorer emits.
pub const STUB_MIN_LOG_PROB: f64 = -20.0;

const MAX_SCENE_CONCEPTS: usize = 6;
const CONCEPT_NOISE: f64 = 0.35;

/// World-level visual embedding of a word; independent of any seed.
pub fn concept_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = seeded_rng(&[b"concept", token.as_bytes()]);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn normal_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

// ---------------------------------------------------------------------------
// Text scorer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StubTextScorer {
    descriptor: BackendDescriptor,
    dim: usize,
    seed: u64,
    projection: Projection,
}

impl StubTextScorer {
    pub fn new(dim: usize, visual_dim: usize, seed: u64) -> Self {
        let descriptor = BackendDescriptor::new(BackendKind::TextScorer, "stub")
            .with("feature_dim", dim as i64)
            .with("seed", seed as i64);
        Self {
            descriptor,
            dim,
            seed,
            projection: Projection::seeded(visual_dim, dim, seed),
        }
    }
}

impl Default for StubTextScorer {
    fn default() -> Self {
        Self::new(DEFAULT_TEXT_DIM, DEFAULT_VISUAL_DIM, 0)
    }
}

impl TextScorer for StubTextScorer {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, input: &TextInput, mode: ScoringMode) -> Result<TextFeatures> {
        encode_text_with(&input.tokens, input.scored_from, mode, self.seed, self.dim)
    }

    fn itm_projection(&self) -> Option<&Projection> {
        Some(&self.projection)
    }
}

fn encode_text_with(
    tokens: &[String],
    scored_from: usize,
    mode: ScoringMode,
    seed: u64,
    dim: usize,
) -> Result<TextFeatures> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty text"));
    }
    let joined = tokens.join("\u{1f}");
    let mode_tag = mode.as_str().as_bytes();
    let seed_b = seed.to_le_bytes();
    let mut rng = seeded_rng(&[b"stub-text", mode_tag, &seed_b, joined.as_bytes()]);
    let context_vector = normal_vec(&mut rng, dim, 1.0 / (dim as f64).sqrt());

    let token_log_probs = (scored_from..tokens.len())
        .map(|t| {
            let visible = match mode {
                ScoringMode::Autoregressive => tokens[..t].join("\u{1f}"),
                ScoringMode::Masked => {
                    let mut v = tokens.to_vec();
                    v[t] = "[MASK]".into();
                    v.join("\u{1f}")
                }
            };
            let h = digest_parts(&[
                b"stub-lp",
                mode_tag,
                &seed_b,
                visible.as_bytes(),
                tokens[t].as_bytes(),
            ]);
            STUB_MIN_LOG_PROB * unit_from_hash(&h)
        })
        .collect();

    Ok(TextFeatures {
        context_vector,
        token_log_probs,
        scoring_mode: mode,
    })
}

/// Stub text encoding of a whole token sequence (every token scored).
pub fn stub_encode_text(text: &[String], mode: ScoringMode, seed: u64) -> Result<TextFeatures> {
    encode_text_with(text, 0, mode, seed, DEFAULT_TEXT_DIM)
}

// ---------------------------------------------------------------------------
// Visual encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StubVisualEncoder {
    descriptor: BackendDescriptor,
    dim: usize,
    grid: (usize, usize),
    seed: u64,
}

impl StubVisualEncoder {
    pub fn new(dim: usize, grid: (usize, usize), seed: u64) -> Result<Self> {
        let descriptor = BackendDescriptor::new(BackendKind::VisualEncoder, "stub")
            .with("feature_dim", dim as i64)
            .with("grid_rows", grid.0 as i64)
            .with("grid_cols", grid.1 as i64)
            .with("seed", seed as i64);
        descriptor.validate()?;
        Ok(Self {
            descriptor,
            dim,
            grid,
            seed,
        })
    }

    pub fn from_descriptor(d: &BackendDescriptor) -> Result<Self> {
        Self::new(
            d.int_or("feature_dim", DEFAULT_VISUAL_DIM as i64) as usize,
            (
                d.int_or("grid_rows", DEFAULT_GRID.0 as i64) as usize,
                d.int_or("grid_cols", DEFAULT_GRID.1 as i64) as usize,
            ),
            d.seed(),
        )
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }
}

impl Default for StubVisualEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_VISUAL_DIM, DEFAULT_GRID, 0).expect("valid defaults")
    }
}

impl VisualEncoder for StubVisualEncoder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &ImageRef) -> Result<VisualFeatures> {
        let path = image.ensure_resolvable()?;
        let meta = SceneMeta::read_sidecar(path)?;
        let (rows, cols) = self.grid;
        let concepts: Vec<Vec<f64>> = meta
            .as_ref()
            .map(|m| m.concepts.iter().map(|c| concept_vector(c, self.dim)).collect())
            .unwrap_or_default();
        let blobs = meta.as_ref().map(|m| m.blobs()).unwrap_or_default();

        let mut rng = seeded_rng(&[b"stub-image", image.id.as_bytes(), &self.seed.to_le_bytes()]);
        let mut patches = Matrix::zeros(rows * cols, self.dim);
        for r in 0..rows {
            for c in 0..cols {
                let x = (c as f64 + 0.5) / cols as f64;
                let y = (r as f64 + 0.5) / rows as f64;
                let row = patches.row_mut(r * cols + c);
                match concept_at(&blobs, x, y) {
                    Some(k) => {
                        row.copy_from_slice(&concepts[k]);
                        let noise = normal_vec(&mut rng, self.dim, CONCEPT_NOISE);
                        axpy(1.0, &noise, row);
                    }
                    None => row.copy_from_slice(&normal_vec(&mut rng, self.dim, 1.0)),
                }
            }
        }
        VisualFeatures::new(patches, self.grid)
    }
}

/// Stub visual encoding with the default 14x14 grid.
pub fn stub_encode_image(image: &ImageRef, seed: u64) -> Result<VisualFeatures> {
    StubVisualEncoder::new(DEFAULT_VISUAL_DIM, DEFAULT_GRID, seed)?.encode(image)
}

// ---------------------------------------------------------------------------
// Text-to-image generator
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct StubGenerator {
    descriptor: BackendDescriptor,
    seed: u64,
    calls: AtomicUsize,
}

impl StubGenerator {
    pub fn new(seed: u64) -> Self {
        let descriptor = BackendDescriptor::new(BackendKind::T2iGenerator, "stub")
            .with("resolution", DEFAULT_TRAIN_RESOLUTION as i64)
            .with("inference_steps", DEFAULT_STEPS as i64)
            .with("seed", seed as i64);
        Self {
            descriptor,
            seed,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of `generate` calls so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl ImageGenerator for StubGenerator {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate(
        &self,
        prompt: &str,
        resolution: u32,
        steps: u32,
        store: &ImageStore,
    ) -> Result<ImageRef> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut concepts = content_words(prompt);
        concepts.truncate(MAX_SCENE_CONCEPTS);
        let meta = SceneMeta::new(prompt, concepts, "stub", resolution, steps, self.seed);
        store.write_scene(&meta)
    }
}

pub fn stub_generate_image(
    prompt: &str,
    resolution: u32,
    steps: u32,
    seed: u64,
    store: &ImageStore,
) -> Result<ImageRef> {
    StubGenerator::new(seed).generate(prompt, resolution, steps, store)
}

// ---------------------------------------------------------------------------
// Captioner
// ---------------------------------------------------------------------------

const ADJECTIVES: &[&str] = &[
    "bright", "dim", "busy", "quiet", "crowded", "empty", "sunny", "rainy", "cozy", "wide",
    "narrow", "colorful", "pale", "warm", "cold", "old", "modern", "messy", "tidy", "small",
];
const NOUNS: &[&str] = &[
    "kitchen", "street", "park", "office", "classroom", "garden", "beach", "station", "shop",
    "bedroom", "market", "library", "yard", "hallway", "cafe", "field", "bridge", "harbor",
    "stage", "gym",
];
const DETAILS: &[&str] = &[
    "a bicycle", "a lamp", "a table", "a dog", "a window", "a crowd", "a tree", "a car",
    "a sign", "a bench", "a clock", "a poster", "a door", "a plant", "a box", "a bag", "a cup",
    "a chair", "a fence", "a boat",
];
const LIGHTING: &[&str] = &[
    "in morning light", "at dusk", "at night", "at noon", "under clouds", "in soft light",
    "in harsh light", "in the rain", "in fog", "in snow", "at sunrise", "under neon light",
    "in shade", "in sunlight", "by candlelight", "in winter", "in spring", "in autumn",
    "in summer", "indoors",
];

#[derive(Debug, Clone)]
pub struct StubCaptioner {
    descriptor: BackendDescriptor,
}

impl Default for StubCaptioner {
    fn default() -> Self {
        Self {
            descriptor: BackendDescriptor::new(BackendKind::Captioner, "stub"),
        }
    }
}

impl Captioner for StubCaptioner {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn caption(&self, image: &ImageRef) -> Result<String> {
        stub_caption(image)
    }
}

pub fn stub_caption(image: &ImageRef) -> Result<String> {
    let path = image.ensure_resolvable()?;
    let h = digest_parts(&[b"caption", image.id.as_bytes()]);
    let pick = |list: &[&'static str], byte: u8| list[byte as usize % list.len()];
    let light = pick(LIGHTING, h[3]);
    match SceneMeta::read_sidecar(path)? {
        Some(meta) if !meta.concepts.is_empty() => {
            let shown = match meta.concepts.as_slice() {
                [one] => one.clone(),
                [init @ .., last] => format!("{} and {}", init.join(", "), last),
                [] => unreachable!(),
            };
            Ok(format!("A picture showing {shown} {light}."))
        }
        _ => Ok(format!(
            "A {} {} with {} {}.",
            pick(ADJECTIVES, h[0]),
            pick(NOUNS, h[1]),
            pick(DETAILS, h[2]),
            light
        )),
    }
}

// ---------------------------------------------------------------------------
// Joint embedder for relevance validation
// ---------------------------------------------------------------------------

/// Embeds text as the sum of its content words' concept vectors and images
/// as the mean of their stub patch features.
#[derive(Debug, Clone)]
pub struct StubJointEmbedder {
    descriptor: BackendDescriptor,
    encoder: StubVisualEncoder,
}

impl StubJointEmbedder {
    pub fn new(seed: u64) -> Self {
        let encoder = StubVisualEncoder::new(DEFAULT_VISUAL_DIM, DEFAULT_GRID, seed)
            .expect("valid defaults");
        let descriptor = BackendDescriptor::new(BackendKind::VisualEncoder, "stub-joint")
            .with("feature_dim", DEFAULT_VISUAL_DIM as i64)
            .with("seed", seed as i64);
        Self {
            descriptor,
            encoder,
        }
    }
}

impl JointEmbedder for StubJointEmbedder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; DEFAULT_VISUAL_DIM];
        for w in content_words(text) {
            axpy(1.0, &concept_vector(&w, DEFAULT_VISUAL_DIM), &mut out);
        }
        Ok(out)
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>> {
        let v = self.encoder.encode(image)?;
        let p = v.num_patches() as f64;
        let mut out = vec![0.0; v.dim()];
        for i in 0..v.num_patches() {
            axpy(1.0 / p, v.patches.row(i), &mut out);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toks(s: &str) -> Vec<String> {
        crate::text::tokenize(s)
    }

    #[test]
    fn text_stub_is_deterministic_and_bounded() {
        let t = toks("the cat sat on the mat");
        let a = stub_encode_text(&t, ScoringMode::Masked, 3).unwrap();
        let b = stub_encode_text(&t, ScoringMode::Masked, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.token_log_probs.len(), t.len());
        assert!(a
            .token_log_probs
            .iter()
            .all(|&lp| (STUB_MIN_LOG_PROB..=0.0).contains(&lp)));
        assert_eq!(a.context_vector.len(), DEFAULT_TEXT_DIM);
    }

    #[test]
    fn text_stub_modes_share_shapes() {
        let t = toks("a quick brown fox");
        let m = stub_encode_text(&t, ScoringMode::Masked, 1).unwrap();
        let ar = stub_encode_text(&t, ScoringMode::Autoregressive, 1).unwrap();
        assert_eq!(m.context_vector.len(), ar.context_vector.len());
        assert_eq!(m.token_log_probs.len(), ar.token_log_probs.len());
        assert_ne!(m.context_vector, ar.context_vector);
    }

    #[test]
    fn text_stub_rejects_empty() {
        assert!(matches!(
            stub_encode_text(&[], ScoringMode::Masked, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn one_token_change_changes_features() {
        // Independent count of feature collisions over 100 fixture pairs.
        let words = ["red", "blue", "green", "tall", "short", "old", "new", "big", "small", "hot"];
        let mut differing = 0;
        for i in 0..100usize {
            let base: Vec<String> = (0..5).map(|k| words[(i + k * 3) % words.len()].into()).collect();
            let mut other = base.clone();
            other[i % 5] = format!("{}x", other[i % 5]);
            let a = stub_encode_text(&base, ScoringMode::Masked, 11).unwrap();
            let b = stub_encode_text(&other, ScoringMode::Masked, 11).unwrap();
            if a.context_vector != b.context_vector {
                differing += 1;
            }
        }
        assert!(differing >= 99, "only {differing} of 100 pairs differ");
    }

    fn scene(store: &ImageStore, prompt: &str) -> ImageRef {
        stub_generate_image(prompt, 64, DEFAULT_STEPS, 7, store).unwrap()
    }

    #[test]
    fn image_stub_default_grid_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let img = scene(&store, "a dog chasing a ball in the park");
        let a = stub_encode_image(&img, 5).unwrap();
        assert_eq!(a.num_patches(), 196);
        assert_eq!(a.dim(), DEFAULT_VISUAL_DIM);
        assert_eq!(a, stub_encode_image(&img, 5).unwrap());
        assert_ne!(a, stub_encode_image(&img, 6).unwrap());
    }

    #[test]
    fn image_stub_small_grid() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let img = scene(&store, "a cat");
        let enc = StubVisualEncoder::new(8, (2, 2), 0).unwrap();
        let v = enc.encode(&img).unwrap();
        assert_eq!(v.num_patches(), 4);
        assert_eq!(v.grid_shape, (2, 2));
    }

    #[test]
    fn missing_image_is_reported() {
        let img = ImageRef {
            id: "nope".into(),
            path: "/definitely/not/here.img".into(),
            resolution: 384,
            generator: "stub".into(),
            prompt_hash: "x".into(),
        };
        assert!(matches!(stub_encode_image(&img, 0), Err(Error::MissingImage(_))));
        assert!(matches!(stub_caption(&img), Err(Error::MissingImage(_))));
    }

    #[test]
    fn generator_ids_are_stable_and_record_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let a = stub_generate_image("P", 384, 50, 7, &store).unwrap();
        let b = stub_generate_image("P", 384, 50, 7, &store).unwrap();
        assert_eq!(a.id, b.id);
        assert_eq!(a.resolution, 384);
        assert_eq!(a.prompt_hash, crate::text::digest_hex(b"P"));
        let c = stub_generate_image("P", 512, 50, 7, &store).unwrap();
        assert_eq!(c.resolution, 512);
    }

    #[test]
    fn generator_reports_unwritable_storage() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path().join("imgs")).unwrap();
        std::fs::remove_dir_all(dir.path().join("imgs")).unwrap();
        std::fs::write(dir.path().join("imgs"), b"file, not a dir").unwrap();
        assert!(matches!(
            stub_generate_image("P", 32, 50, 0, &store),
            Err(Error::Storage { .. })
        ));
    }

    #[test]
    fn captions_are_deterministic_and_mostly_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let mut captions = HashSet::new();
        for i in 0..100 {
            let img = stub_generate_image(&format!("scene number {i}"), 16, 50, 1, &store).unwrap();
            let c = stub_caption(&img).unwrap();
            assert!(!c.is_empty());
            assert_eq!(c, stub_caption(&img).unwrap());
            captions.insert(c);
        }
        assert!(captions.len() >= 99, "{} distinct captions", captions.len());
    }

    #[test]
    fn concept_patches_sit_near_concept_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let img = scene(&store, "umbrella");
        let v = stub_encode_image(&img, 0).unwrap();
        let target = concept_vector("umbrella", DEFAULT_VISUAL_DIM);
        let best = (0..v.num_patches())
            .map(|i| crate::scoring::cosine(v.patches.row(i), &target).unwrap_or(0.0))
            .fold(f64::MIN, f64::max);
        assert!(best > 0.9, "best cosine {best}");
    }
}
