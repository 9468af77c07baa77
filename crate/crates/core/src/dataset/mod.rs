//! Synthetic VQA construction.
//!
//! Knowledge-base triples become three-choice questions through relation
//! templates; each question is neutralized (person names become "Person")
//! and rendered into an image by the text-to-image backend. VCR-style
//! four-choice records with real images are harmonized into the same
//! three-choice schema with a caption prefix.

use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendKind, ImageGenerator, ImageRef, ImageStore};
use crate::error::{Error, Result};
use crate::text::{content_words, seeded_rng};

pub mod builder;
pub mod io;
pub mod templates;
pub mod vcr;

pub use builder::{build_dataset, BuildConfig, BuildOutput};
pub use io::{read_jsonl, read_vqa_jsonl, write_vqa_jsonl, VqaRecord};
pub use templates::TemplateTable;
pub use vcr::{harmonize_vcr, VcrRecord, DEFAULT_NEUTRAL_NAMES};

/// Choices per item after harmonization.
pub const HARMONIZED_CHOICES: usize = 3;
pub const DEFAULT_DISTRACTORS: usize = HARMONIZED_CHOICES - 1;
pub const GENERATION_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TripleSource {
    #[default]
    Base,
    Conceptualized,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default)]
    pub source: TripleSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    SyntheticKb,
    Vcr,
    /// Evaluation items loaded from a benchmark file.
    Benchmark,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
    pub source: PairSource,
}

impl QAPair {
    pub fn validate(&self) -> Result<()> {
        let n = self.choices.len();
        if n < 2 {
            return Err(Error::invalid(format!("{}: needs at least two choices", self.id)));
        }
        if self.answer_index >= n {
            return Err(Error::invalid(format!(
                "{}: answer_index {} out of range for {n} choices",
                self.id, self.answer_index
            )));
        }
        let distinct: HashSet<&String> = self.choices.iter().collect();
        if distinct.len() != n {
            return Err(Error::invalid(format!("{}: duplicate choices", self.id)));
        }
        Ok(())
    }

    pub fn gold(&self) -> &str {
        &self.choices[self.answer_index]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VQAPair {
    pub qa: QAPair,
    pub image: Option<ImageRef>,
    pub caption_prefix: Option<String>,
}

impl VQAPair {
    pub fn text_only(qa: QAPair) -> Self {
        Self {
            qa,
            image: None,
            caption_prefix: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Triple → QA
// ---------------------------------------------------------------------------

/// Deterministic id of a triple.
pub fn triple_id(t: &KnowledgeTriple) -> String {
    let h = crate::text::digest_parts(&[t.head.as_bytes(), t.relation.as_bytes(), t.tail.as_bytes()]);
    format!("kb-{}", hex::encode(&h[..6]))
}

/// Builds a question from `triple` with the tail as the gold answer and `k`
/// distractors drawn uniformly from `distractor_pool`.
///
/// Candidates equal to the tail or sharing a content word with it are
/// rejected. The pool is sorted and deduplicated first, and the sampler is
/// seeded from `seed` and the triple itself, so results do not depend on
/// pool order or on which other triples are processed.
pub fn triple_to_qa(
    triple: &KnowledgeTriple,
    distractor_pool: &[String],
    k: usize,
    seed: u64,
    table: &TemplateTable,
) -> Result<QAPair> {
    let question = table.render(&triple.head, &triple.relation)?;
    if triple.head.trim().is_empty() || triple.tail.trim().is_empty() {
        return Err(Error::invalid("triple head and tail must be non-empty"));
    }
    let tail = triple.tail.trim();
    let gold_words: HashSet<String> = content_words(tail).into_iter().collect();

    let mut pool: Vec<&str> = distractor_pool.iter().map(|s| s.trim()).collect();
    pool.sort_unstable();
    pool.dedup();
    let candidates: Vec<&str> = pool
        .into_iter()
        .filter(|c| !c.is_empty() && *c != tail)
        .filter(|c| content_words(c).iter().all(|w| !gold_words.contains(w)))
        .collect();
    if candidates.len() < k {
        return Err(Error::PoolExhausted {
            needed: k,
            found: candidates.len(),
        });
    }

    let mut rng = seeded_rng(&[
        b"triple_to_qa",
        &seed.to_le_bytes(),
        triple.head.as_bytes(),
        triple.relation.as_bytes(),
        tail.as_bytes(),
    ]);
    let mut choices: Vec<String> = vec![tail.to_string()];
    choices.extend(
        candidates
            .choose_multiple(&mut rng, k)
            .map(|s| s.to_string()),
    );
    choices.shuffle(&mut rng);
    let answer_index = choices.iter().position(|c| c == tail).expect("gold present");

    Ok(QAPair {
        id: triple_id(triple),
        question,
        choices,
        answer_index,
        source: PairSource::SyntheticKb,
    })
}

// ---------------------------------------------------------------------------
// Name neutralization
// ---------------------------------------------------------------------------

pub const NEUTRAL_PERSON: &str = "Person";

/// Placeholders used by ATOMIC-style heads.
pub const DEFAULT_NAME_LEXICON: &[&str] = &["PersonX", "PersonY", "PersonZ"];

/// Replaces whole-word occurrences of lexicon names with "Person".
#[derive(Debug, Clone)]
pub struct NameNeutralizer {
    pattern: Option<Regex>,
}

impl NameNeutralizer {
    pub fn new<S: AsRef<str>>(lexicon: &[S]) -> Self {
        let mut names: Vec<&str> = lexicon
            .iter()
            .map(|s| s.as_ref().trim())
            .filter(|s| !s.is_empty())
            .collect();
        if names.is_empty() {
            return Self { pattern: None };
        }
        names.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        names.dedup();
        let alt = names.iter().map(|n| regex::escape(n)).collect::<Vec<_>>().join("|");
        let pattern = Regex::new(&format!(r"\b(?:{alt})\b")).expect("escaped alternation");
        Self {
            pattern: Some(pattern),
        }
    }

    pub fn apply(&self, question: &str) -> String {
        match &self.pattern {
            Some(re) => re.replace_all(question, NEUTRAL_PERSON).into_owned(),
            None => question.to_string(),
        }
    }
}

impl Default for NameNeutralizer {
    fn default() -> Self {
        Self::new(DEFAULT_NAME_LEXICON)
    }
}

pub fn neutralize_names<S: AsRef<str>>(question: &str, name_lexicon: &[S]) -> String {
    NameNeutralizer::new(name_lexicon).apply(question)
}

/// Keeps the first pair for each distinct neutralized question, in order.
pub fn dedup_questions(pairs: &[QAPair], neutralizer: &NameNeutralizer) -> Vec<QAPair> {
    let mut seen = HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert(neutralizer.apply(&p.question)))
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// Imagination: question → image
// ---------------------------------------------------------------------------

/// Generates (or fetches from cache) the image for a question.
pub struct Imaginer<'a> {
    pub generator: &'a dyn ImageGenerator,
    pub store: &'a ImageStore,
    pub neutralizer: &'a NameNeutralizer,
    pub resolution: u32,
    pub steps: u32,
    pub retries: usize,
}

impl<'a> Imaginer<'a> {
    pub fn prompt_for(&self, question: &str) -> String {
        self.neutralizer.apply(question)
    }

    /// Image for `question`, generating it only on a cache miss.
    pub fn imagine(&self, question: &str) -> Result<ImageRef> {
        let desc = self.generator.descriptor();
        if desc.kind != BackendKind::T2iGenerator {
            return Err(Error::invalid(format!(
                "backend `{}` is a {}, not a t2i_generator",
                desc.name, desc.kind
            )));
        }
        let prompt = self.prompt_for(question);
        if let Some(hit) =
            self.store
                .lookup(&prompt, &desc.name, self.resolution, self.steps, desc.seed())?
        {
            return Ok(hit);
        }
        let attempts = self.retries.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self
                .generator
                .generate(&prompt, self.resolution, self.steps, self.store)
            {
                Ok(img) => return Ok(img),
                Err(e) => {
                    warn!("generation attempt {attempt}/{attempts} failed for {prompt:?}: {e}");
                    last = e.to_string();
                }
            }
        }
        Err(Error::Generation {
            attempts,
            reason: last,
        })
    }
}

pub fn attach_image(qa: QAPair, imaginer: &Imaginer<'_>) -> Result<VQAPair> {
    let image = imaginer.imagine(&qa.question)?;
    Ok(VQAPair {
        qa,
        image: Some(image),
        caption_prefix: None,
    })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub images: usize,
    pub qa_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub sources: BTreeMap<PairSource, SourceCounts>,
    pub totals: SourceCounts,
    pub template_table_version: String,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn check_totals(&self) -> bool {
        let images: usize = self.sources.values().map(|c| c.images).sum();
        let pairs: usize = self.sources.values().map(|c| c.qa_pairs).sum();
        images == self.totals.images && pairs == self.totals.qa_pairs
    }
}

/// Per-source counts of QA pairs and distinct images.
pub fn build_manifest(
    pairs: &[VQAPair],
    split: Split,
    template_table_version: &str,
    seed: u64,
) -> DatasetManifest {
    let mut images: BTreeMap<PairSource, HashSet<&str>> = BTreeMap::new();
    let mut sources: BTreeMap<PairSource, SourceCounts> = BTreeMap::new();
    for p in pairs {
        let set = images.entry(p.qa.source).or_default();
        if let Some(img) = &p.image {
            set.insert(&img.id);
        }
        sources.entry(p.qa.source).or_default().qa_pairs += 1;
    }
    for (src, set) in &images {
        sources.get_mut(src).expect("same keys").images = set.len();
    }
    let totals = SourceCounts {
        images: sources.values().map(|c| c.images).sum(),
        qa_pairs: sources.values().map(|c| c.qa_pairs).sum(),
    };
    DatasetManifest {
        split,
        sources,
        totals,
        template_table_version: template_table_version.to_string(),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendDescriptor, StubGenerator};

    fn triple(head: &str, rel: &str, tail: &str) -> KnowledgeTriple {
        KnowledgeTriple {
            head: head.into(),
            relation: rel.into(),
            tail: tail.into(),
            source: TripleSource::Base,
        }
    }

    fn pool() -> Vec<String> {
        ["to go to sleep", "to buy a car", "to read a book", "to wash the dishes", "to call mom"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn xwant_triple_becomes_three_choice_question() {
        let t = triple("PersonX eats breakfast", "xWant", "to wash the dishes");
        let qa = triple_to_qa(&t, &pool(), 2, 7, &TemplateTable::default()).unwrap();
        assert!(qa.question.ends_with("As a result, PersonX wanted to"));
        assert_eq!(qa.gold(), "to wash the dishes");
        assert_eq!(qa.choices.len(), 3);
        qa.validate().unwrap();
        assert_eq!(qa, triple_to_qa(&t, &pool(), 2, 7, &TemplateTable::default()).unwrap());
    }

    #[test]
    fn pool_order_does_not_matter() {
        let t = triple("PersonX eats breakfast", "xWant", "to wash the dishes");
        let mut rev = pool();
        rev.reverse();
        let table = TemplateTable::default();
        assert_eq!(
            triple_to_qa(&t, &pool(), 2, 3, &table).unwrap(),
            triple_to_qa(&t, &rev, 2, 3, &table).unwrap()
        );
    }

    #[test]
    fn distractors_never_share_content_words_with_gold() {
        let t = triple("PersonX is hungry", "xWant", "to eat a sandwich");
        let pool: Vec<String> = ["to eat soup", "a sandwich", "to sleep", "to run", "to sing"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for seed in 0..20 {
            let qa = triple_to_qa(&t, &pool, 2, seed, &TemplateTable::default()).unwrap();
            for c in &qa.choices {
                if c != "to eat a sandwich" {
                    assert!(["to sleep", "to run", "to sing"].contains(&c.as_str()));
                }
            }
        }
    }

    #[test]
    fn pool_exhaustion_and_unknown_relation() {
        let t = triple("PersonX eats", "xWant", "to rest");
        assert!(matches!(
            triple_to_qa(&t, &[], 2, 0, &TemplateTable::default()),
            Err(Error::PoolExhausted { needed: 2, found: 0 })
        ));
        assert!(matches!(
            triple_to_qa(&t, &["to rest".to_string(), "to run".to_string()], 2, 0, &TemplateTable::default()),
            Err(Error::PoolExhausted { needed: 2, found: 1 })
        ));
        let bad = triple("PersonX eats", "xJump", "to rest");
        assert!(matches!(
            triple_to_qa(&bad, &pool(), 2, 0, &TemplateTable::default()),
            Err(Error::UnknownRelation(_))
        ));
    }

    #[test]
    fn every_template_round_trips() {
        let table = TemplateTable::default();
        for rel in table.relations() {
            let t = triple("PersonX opens the door", rel, "to walk outside");
            triple_to_qa(&t, &pool(), 2, 1, &table).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn neutralize_examples() {
        assert_eq!(neutralize_names("Alex wants to eat", &["Alex"]), "Person wants to eat");
        assert_eq!(
            neutralize_names("Nobody here wants to eat", &["Alex"]),
            "Nobody here wants to eat"
        );
        assert_eq!(neutralize_names("Alexander met Alex.", &["Alex"]), "Alexander met Person.");
        assert_eq!(
            neutralize_names("PersonX gives PersonY a gift", DEFAULT_NAME_LEXICON),
            "Person gives Person a gift"
        );
    }

    #[test]
    fn neutralize_is_idempotent_over_fixture_questions() {
        let names = ["Alex", "Sam", "Jordan", "PersonX", "PersonY"];
        let n = NameNeutralizer::new(&names);
        let heads = ["Alex", "Sam", "Jordan", "PersonX", "PersonY", "The dog", "Samantha"];
        let verbs = ["sees", "helps", "calls", "follows", "paints"];
        let mut count = 0;
        for i in 0..500 {
            let q = format!(
                "{} {} {} at noon, {}?",
                heads[i % heads.len()],
                verbs[(i / 7) % verbs.len()],
                heads[(i / 3) % heads.len()],
                names[(i / 11) % names.len()]
            );
            let once = n.apply(&q);
            assert_eq!(n.apply(&once), once);
            count += 1;
        }
        assert_eq!(count, 500);
    }

    fn qa(id: &str, q: &str) -> QAPair {
        QAPair {
            id: id.into(),
            question: q.into(),
            choices: vec!["a".into(), "b".into(), "c".into()],
            answer_index: 0,
            source: PairSource::SyntheticKb,
        }
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let n = NameNeutralizer::default();
        let pairs = vec![
            qa("1", "PersonX runs. As a result, PersonX feels"),
            qa("2", "PersonY runs. As a result, PersonY feels"),
            qa("3", "PersonX sleeps."),
        ];
        let out = dedup_questions(&pairs, &n);
        assert_eq!(out.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), vec!["1", "3"]);
        let distinct = vec![qa("1", "a"), qa("2", "b")];
        assert_eq!(dedup_questions(&distinct, &n), distinct);
        let distinct_count: HashSet<String> = pairs.iter().map(|p| n.apply(&p.question)).collect();
        assert_eq!(out.len(), distinct_count.len());
    }

    #[test]
    fn attach_image_caches_by_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let gen = StubGenerator::new(1);
        let n = NameNeutralizer::default();
        let im = Imaginer {
            generator: &gen,
            store: &store,
            neutralizer: &n,
            resolution: 384,
            steps: 50,
            retries: GENERATION_RETRIES,
        };
        let a = attach_image(qa("1", "PersonX eats. As a result, PersonX wanted to"), &im).unwrap();
        let b = attach_image(qa("2", "PersonY eats. As a result, PersonY wanted to"), &im).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(gen.calls(), 1);
        let img = a.image.unwrap();
        assert_eq!(img.resolution, 384);
        assert_eq!(
            img.prompt_hash,
            crate::text::digest_hex(b"Person eats. As a result, Person wanted to")
        );

        // A fresh generator over a pre-populated cache is never called.
        let gen2 = StubGenerator::new(1);
        let im2 = Imaginer { generator: &gen2, ..im };
        attach_image(qa("3", "PersonX eats. As a result, PersonX wanted to"), &im2).unwrap();
        assert_eq!(gen2.calls(), 0);
    }

    struct Failing(BackendDescriptor);
    impl ImageGenerator for Failing {
        fn descriptor(&self) -> &BackendDescriptor {
            &self.0
        }
        fn generate(&self, _: &str, _: u32, _: u32, _: &ImageStore) -> Result<ImageRef> {
            Err(Error::invalid("gpu on fire"))
        }
    }

    #[test]
    fn generation_failure_after_retries() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let gen = Failing(BackendDescriptor::new(BackendKind::T2iGenerator, "failing"));
        let n = NameNeutralizer::default();
        let im = Imaginer {
            generator: &gen,
            store: &store,
            neutralizer: &n,
            resolution: 384,
            steps: 50,
            retries: 3,
        };
        assert!(matches!(
            attach_image(qa("1", "q"), &im),
            Err(Error::Generation { attempts: 3, .. })
        ));
    }

    fn vqa(id: &str, src: PairSource, image_id: Option<&str>) -> VQAPair {
        let mut q = qa(id, id);
        q.source = src;
        VQAPair {
            qa: q,
            image: image_id.map(|i| ImageRef {
                id: i.into(),
                path: "x".into(),
                resolution: 384,
                generator: "stub".into(),
                prompt_hash: i.into(),
            }),
            caption_prefix: None,
        }
    }

    #[test]
    fn manifest_counts() {
        let pairs = vec![
            vqa("1", PairSource::SyntheticKb, Some("a")),
            vqa("2", PairSource::SyntheticKb, Some("a")),
            vqa("3", PairSource::SyntheticKb, Some("b")),
            vqa("4", PairSource::Vcr, Some("c")),
            vqa("5", PairSource::Vcr, Some("d")),
        ];
        let m = build_manifest(&pairs, Split::Train, "v", 1);
        assert_eq!(m.totals.qa_pairs, 5);
        assert_eq!(m.sources[&PairSource::SyntheticKb], SourceCounts { images: 2, qa_pairs: 3 });
        assert_eq!(m.sources[&PairSource::Vcr], SourceCounts { images: 2, qa_pairs: 2 });
        assert!(m.check_totals());

        let empty = build_manifest(&[], Split::Dev, "v", 1);
        assert_eq!(empty.totals, SourceCounts::default());
        assert!(empty.sources.is_empty());
    }

    #[test]
    fn manifest_counts_distinct_prompts() {
        // 100 pairs: 40 share 10 prompts, the other 60 have their own.
        let mut pairs = Vec::new();
        for i in 0..40 {
            pairs.push(vqa(&format!("s{i}"), PairSource::SyntheticKb, Some(&format!("shared{}", i % 10))));
        }
        for i in 0..60 {
            pairs.push(vqa(&format!("u{i}"), PairSource::SyntheticKb, Some(&format!("own{i}"))));
        }
        let oracle: HashSet<String> = pairs
            .iter()
            .map(|p| p.image.as_ref().unwrap().id.clone())
            .collect();
        let m = build_manifest(&pairs[..40], Split::Train, "v", 0);
        assert_eq!(m.sources[&PairSource::SyntheticKb].images, 10);
        let m = build_manifest(&pairs, Split::Train, "v", 0);
        assert_eq!(m.sources[&PairSource::SyntheticKb].images, oracle.len());
    }
}
