//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use mcfuse::backends::{ImageStore, SceneMeta, StubVisualEncoder};
use mcfuse::backends::stub::{DEFAULT_GRID, DEFAULT_VISUAL_DIM};
use mcfuse::dataset::{PairSource, QAPair, VQAPair};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OBJECTS: [&str; 8] = ["apple", "ball", "cat", "dog", "car", "tree", "boat", "fish"];
pub const CUES: [&str; 8] = ["red", "round", "meow", "bark", "drive", "leaf", "sail", "swim"];
const TEXT_TEMPLATES: [&str; 4] = [
    "which thing goes with {cue}",
    "which one goes with {cue} here",
    "the thing with {cue} is this one",
    "what goes with {cue}",
];
const DISCS: usize = 3;
const IMAGE_TEMPLATES: [&str; 3] = [
    "what is shown in the picture",
    "what is in this image",
    "which thing is shown here",
];

/// Three-choice items: half answerable from a cue word in the question (the
/// cue maps to its object one-to-one and the image shows nothing), half
/// answerable only from the image, which depicts the gold object.
pub fn separable_task(n: usize, seed: u64, store: &ImageStore) -> Vec<VQAPair> {
    separable_task_k(n, seed, store, OBJECTS.len())
}

pub fn separable_task_k(n: usize, seed: u64, store: &ImageStore, k_obj: usize) -> Vec<VQAPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let gold_obj = rng.gen_range(0..k_obj);
        let mut others: Vec<usize> = (0..k_obj).filter(|&o| o != gold_obj).collect();
        others.shuffle(&mut rng);
        let mut choices = [gold_obj, others[0], others[1]];
        choices.shuffle(&mut rng);
        let answer_index = choices.iter().position(|&c| c == gold_obj).unwrap();
        let text_item = k % 2 == 0;
        let (question, concepts) = if text_item {
            let t = TEXT_TEMPLATES[rng.gen_range(0..TEXT_TEMPLATES.len())];
            (t.replace("{cue}", CUES[gold_obj]), vec![])
        } else {
            let t = IMAGE_TEMPLATES[rng.gen_range(0..IMAGE_TEMPLATES.len())];
            (t.to_string(), vec![OBJECTS[gold_obj].to_string(); DISCS])
        };
        let id = format!("sep-{seed}-{k}");
        // Every item gets its own scene so patch noise differs per item.
        let meta = SceneMeta::new(&id, concepts, "fixture", 64, 1, seed);
        let image = store.write_scene(&meta).unwrap();
        out.push(VQAPair {
            qa: QAPair {
                id,
                question,
                choices: choices.iter().map(|&c| OBJECTS[c].to_string()).collect(),
                answer_index,
                source: PairSource::SyntheticKb,
            },
            image: Some(image),
            caption_prefix: None,
        });
    }
    out
}

pub fn stub_encoder(seed: u64) -> StubVisualEncoder {
    StubVisualEncoder::new(DEFAULT_VISUAL_DIM, DEFAULT_GRID, seed).unwrap()
}

pub fn tmp_store(dir: &Path) -> ImageStore {
    ImageStore::open(dir.join("images")).unwrap()
}
