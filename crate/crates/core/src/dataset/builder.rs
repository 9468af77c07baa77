//! End-to-end dataset construction: triples and VCR records in, JSONL
//! splits plus images and a manifest out.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::store::{prompt_hash, write_atomic};
use crate::backends::{Captioner, ImageGenerator, ImageRef, ImageStore};
use crate::backends::stub::{DEFAULT_STEPS, DEFAULT_TRAIN_RESOLUTION};
use crate::error::{Error, Result};
use crate::text::{digest_hex, digest_parts, unit_from_hash};

use super::io::{read_jsonl, write_vqa_jsonl};
use super::vcr::{harmonize_vcr_qa, VcrRecord, DEFAULT_NEUTRAL_NAMES};
use super::{
    build_manifest, triple_to_qa, DatasetManifest, Imaginer, KnowledgeTriple, NameNeutralizer,
    QAPair, Split, TemplateTable, VQAPair, DEFAULT_DISTRACTORS, DEFAULT_NAME_LEXICON,
    GENERATION_RETRIES,
};

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub kb: Option<PathBuf>,
    pub vcr: Option<PathBuf>,
    pub out: PathBuf,
    pub resolution: u32,
    pub steps: u32,
    pub seed: u64,
    pub dev_fraction: f64,
    pub distractors: usize,
    pub templates: TemplateTable,
    pub name_lexicon: Vec<String>,
    pub neutral_names: Vec<String>,
    /// Upper bound on concurrent image generations.
    pub workers: usize,
}

impl BuildConfig {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            kb: None,
            vcr: None,
            out: out.into(),
            resolution: DEFAULT_TRAIN_RESOLUTION,
            steps: DEFAULT_STEPS,
            seed: 0,
            dev_fraction: 0.1,
            distractors: DEFAULT_DISTRACTORS,
            templates: TemplateTable::default(),
            name_lexicon: DEFAULT_NAME_LEXICON.iter().map(|s| s.to_string()).collect(),
            neutral_names: DEFAULT_NEUTRAL_NAMES.iter().map(|s| s.to_string()).collect(),
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildOutput {
    pub train: DatasetManifest,
    pub dev: DatasetManifest,
    /// Pairs dropped because their image could not be produced.
    pub skipped: usize,
    pub generated_images: usize,
}

fn in_dev(key: &str, seed: u64, dev_fraction: f64) -> bool {
    let h = digest_parts(&[b"split", &seed.to_le_bytes(), key.as_bytes()]);
    unit_from_hash(&h) < dev_fraction
}

fn synthetic_pairs(cfg: &BuildConfig, path: &Path) -> Result<Vec<QAPair>> {
    let triples: Vec<KnowledgeTriple> = read_jsonl(path)?;
    for (i, t) in triples.iter().enumerate() {
        if t.head.trim().is_empty() || t.tail.trim().is_empty() {
            return Err(Error::schema(Some(i + 1), "head and tail must be non-empty"));
        }
        cfg.templates.get(&t.relation)?;
    }
    let pool: Vec<String> = triples.iter().map(|t| t.tail.trim().to_string()).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in &triples {
        let qa = triple_to_qa(t, &pool, cfg.distractors, cfg.seed, &cfg.templates)?;
        // Repeated triples collapse to one pair.
        if seen.insert(qa.id.clone()) {
            out.push(qa);
        }
    }
    Ok(out)
}

/// Copies an external image into `images/` under a content address.
fn import_image(src: &Path, images: &Path) -> Result<PathBuf> {
    let bytes = std::fs::read(src).map_err(|_| Error::MissingImage(src.display().to_string()))?;
    let ext = src
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("img")
        .to_ascii_lowercase();
    let dest = images.join(format!("{}.{ext}", digest_hex(&bytes)));
    if !dest.is_file() {
        write_atomic(&dest, &bytes)?;
    }
    Ok(dest)
}

fn vcr_pairs(
    cfg: &BuildConfig,
    path: &Path,
    images: &Path,
    captioner: &dyn Captioner,
) -> Result<Vec<VQAPair>> {
    let records: Vec<VcrRecord> = read_jsonl(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let qa = harmonize_vcr_qa(rec, &cfg.neutral_names, cfg.seed).map_err(|e| match e {
            Error::Schema { message, .. } => Error::schema(Some(i + 1), message),
            other => other,
        })?;
        let copied = import_image(&base.join(&rec.image_path), images)?;
        let image = ImageRef::from_path(&copied)?;
        let caption = captioner.caption(&image)?;
        out.push(VQAPair {
            qa,
            image: Some(image),
            caption_prefix: Some(caption),
        });
    }
    Ok(out)
}

/// Runs the full pipeline and writes `train.jsonl`, `dev.jsonl`,
/// `manifest.json` and `images/` under `cfg.out`.
///
/// One image is generated per distinct neutralized question; every pair
/// with that question shares it. Output bytes do not depend on `workers`.
pub fn build_dataset(
    cfg: &BuildConfig,
    generator: &dyn ImageGenerator,
    captioner: &dyn Captioner,
) -> Result<BuildOutput> {
    if !(0.0..=1.0).contains(&cfg.dev_fraction) {
        return Err(Error::invalid("dev_fraction must lie in [0, 1]"));
    }
    if cfg.kb.is_none() && cfg.vcr.is_none() {
        return Err(Error::invalid("nothing to build: give a knowledge base and/or VCR file"));
    }
    let images_dir = cfg.out.join("images");
    let store = ImageStore::open(&images_dir)?;
    let neutralizer = NameNeutralizer::new(&cfg.name_lexicon);

    let mut pairs: Vec<VQAPair> = Vec::new();
    let mut skipped = 0;
    let before = generator_calls_probe(&store);

    if let Some(kb) = &cfg.kb {
        let qas = synthetic_pairs(cfg, kb)?;
        let unique = super::dedup_questions(&qas, &neutralizer);
        let imaginer = Imaginer {
            generator,
            store: &store,
            neutralizer: &neutralizer,
            resolution: cfg.resolution,
            steps: cfg.steps,
            retries: GENERATION_RETRIES,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers.max(1))
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?;
        let results: Vec<(String, Result<ImageRef>)> = pool.install(|| {
            unique
                .par_iter()
                .map(|qa| {
                    let prompt = neutralizer.apply(&qa.question);
                    let img = imaginer.imagine(&qa.question);
                    (prompt, img)
                })
                .collect()
        });
        let mut by_prompt: HashMap<String, ImageRef> = HashMap::new();
        for (prompt, res) in results {
            match res {
                Ok(img) => {
                    by_prompt.insert(prompt, img);
                }
                Err(e) => warn!("skipping pairs for prompt {prompt:?}: {e}"),
            }
        }
        for qa in qas {
            match by_prompt.get(&neutralizer.apply(&qa.question)) {
                Some(img) => pairs.push(VQAPair {
                    qa,
                    image: Some(img.clone()),
                    caption_prefix: None,
                }),
                None => skipped += 1,
            }
        }
    }
    if let Some(vcr) = &cfg.vcr {
        pairs.extend(vcr_pairs(cfg, vcr, &images_dir, captioner)?);
    }

    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for p in pairs {
        let img = p.image.as_ref().expect("every built pair has an image");
        let key = match p.qa.source {
            super::PairSource::SyntheticKb => prompt_hash(&neutralizer.apply(&p.qa.question)),
            _ => img.id.clone(),
        };
        if in_dev(&key, cfg.seed, cfg.dev_fraction) {
            dev.push(p);
        } else {
            train.push(p);
        }
    }

    write_vqa_jsonl(&cfg.out.join("train.jsonl"), &train)?;
    write_vqa_jsonl(&cfg.out.join("dev.jsonl"), &dev)?;
    let version = &cfg.templates.version;
    let out = BuildOutput {
        train: build_manifest(&train, Split::Train, version, cfg.seed),
        dev: build_manifest(&dev, Split::Dev, version, cfg.seed),
        skipped,
        generated_images: generator_calls_probe(&store).saturating_sub(before),
    };
    let manifest: BTreeMap<&str, &DatasetManifest> =
        [("train", &out.train), ("dev", &out.dev)].into_iter().collect();
    write_atomic(
        &cfg.out.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    info!(
        "built {} train / {} dev pairs ({} skipped)",
        out.train.totals.qa_pairs, out.dev.totals.qa_pairs, skipped
    );
    Ok(out)
}

/// Number of stored images, used to report how many were new.
fn generator_calls_probe(store: &ImageStore) -> usize {
    std::fs::read_dir(store.root())
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "img"))
                .count()
        })
        .unwrap_or(0)
}
