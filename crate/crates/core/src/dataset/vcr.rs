//! Harmonization of VCR-style records into three-choice pairs.
//!
//! VCR questions and answers are token sequences in which people are
//! referenced by detection index (`[0]`, `[1]`, or a JSON list of indices).
//! Those references become gender-neutral names, one distractor is dropped
//! at random, and the image caption is kept as a question prefix.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Captioner, ImageRef};
use crate::error::{Error, Result};
use crate::text::{digest_parts, seeded_rng};

use super::{PairSource, QAPair, VQAPair};

pub const DEFAULT_NEUTRAL_NAMES: &[&str] = &[
    "Jordan", "Taylor", "Casey", "Riley", "Jamie", "Avery", "Quinn", "Skyler", "Morgan", "Rowan",
];

pub const VCR_CHOICES: usize = 4;

/// A token is either a word or a group of person indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VcrToken {
    Word(String),
    People(Vec<u64>),
}

/// Text given either as a plain string or as VCR tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VcrText {
    Plain(String),
    Tokens(Vec<VcrToken>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcrRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question_tokens: VcrText,
    pub choices: Vec<VcrText>,
    pub answer_index: usize,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person_boxes: Option<serde_json::Value>,
}

impl VcrRecord {
    /// Explicit id, or a digest of the record's content.
    pub fn stable_id(&self) -> String {
        if let Some(id) = &self.id {
            return id.clone();
        }
        let json = serde_json::to_vec(self).expect("record serializes");
        let h = digest_parts(&[b"vcr", &json]);
        format!("vcr-{}", hex::encode(&h[..6]))
    }
}

fn name(i: u64, names: &[String]) -> &str {
    &names[(i % names.len() as u64) as usize]
}

fn join_names(ids: &[u64], names: &[String]) -> Result<String> {
    let parts: Vec<&str> = ids.iter().map(|&i| name(i, names)).collect();
    match parts.as_slice() {
        [] => Err(Error::schema(None, "empty person reference")),
        [one] => Ok(one.to_string()),
        [init @ .., last] => Ok(format!("{} and {}", init.join(", "), last)),
    }
}

fn is_attached_punct(word: &str) -> bool {
    matches!(word, "," | "." | "?" | "!" | ";" | ":" | "'s" | "'" | ")" | "n't")
}

/// Replaces bracketed indices such as `[3]` inside a plain string.
fn replace_bracketed(text: &str, names: &[String]) -> Result<String> {
    let re = regex::Regex::new(r"\[(\d+)\]").expect("static pattern");
    let mut err = None;
    let out = re.replace_all(text, |c: &regex::Captures<'_>| match c[1].parse::<u64>() {
        Ok(i) => name(i, names).to_string(),
        Err(e) => {
            err = Some(Error::schema(None, format!("bad person index `{}`: {e}", &c[1])));
            String::new()
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out.into_owned()),
    }
}

/// Renders VCR text with person references replaced by names.
pub fn render_vcr_text(text: &VcrText, names: &[String]) -> Result<String> {
    if names.is_empty() {
        return Err(Error::invalid("neutral name list is empty"));
    }
    match text {
        VcrText::Plain(s) => replace_bracketed(s.trim(), names),
        VcrText::Tokens(tokens) => {
            let mut out = String::new();
            for tok in tokens {
                let word = match tok {
                    VcrToken::Word(w) => replace_bracketed(w, names)?,
                    VcrToken::People(ids) => join_names(ids, names)?,
                };
                if word.is_empty() {
                    continue;
                }
                if !out.is_empty() && !is_attached_punct(&word) {
                    out.push(' ');
                }
                out.push_str(&word);
            }
            Ok(out)
        }
    }
}

/// Text side of harmonization: names substituted, one distractor dropped.
pub fn harmonize_vcr_qa<S: AsRef<str>>(
    record: &VcrRecord,
    neutral_names: &[S],
    seed: u64,
) -> Result<QAPair> {
    let names: Vec<String> = neutral_names.iter().map(|s| s.as_ref().to_string()).collect();
    if record.choices.len() != VCR_CHOICES {
        return Err(Error::schema(
            None,
            format!("expected {VCR_CHOICES} choices, found {}", record.choices.len()),
        ));
    }
    if record.answer_index >= VCR_CHOICES {
        return Err(Error::schema(
            None,
            format!("answer_index {} out of range", record.answer_index),
        ));
    }
    let id = record.stable_id();
    let question = render_vcr_text(&record.question_tokens, &names)?;
    let rendered: Vec<String> = record
        .choices
        .iter()
        .map(|c| render_vcr_text(c, &names))
        .collect::<Result<_>>()?;

    let mut rng = seeded_rng(&[b"vcr-drop", &seed.to_le_bytes(), id.as_bytes()]);
    let distractors: Vec<usize> = (0..VCR_CHOICES).filter(|&i| i != record.answer_index).collect();
    let dropped = distractors[rng.gen_range(0..distractors.len())];

    let mut choices = Vec::with_capacity(VCR_CHOICES - 1);
    let mut answer_index = 0;
    for (i, c) in rendered.into_iter().enumerate() {
        if i == dropped {
            continue;
        }
        if i == record.answer_index {
            answer_index = choices.len();
        }
        choices.push(c);
    }
    let qa = QAPair {
        id,
        question,
        choices,
        answer_index,
        source: PairSource::Vcr,
    };
    qa.validate()
        .map_err(|e| Error::schema(None, e.to_string()))?;
    Ok(qa)
}

/// Full harmonization. `image_path` is resolved against `base_dir` and the
/// image caption becomes the question prefix.
pub fn harmonize_vcr<S: AsRef<str>>(
    record: &VcrRecord,
    neutral_names: &[S],
    seed: u64,
    base_dir: &Path,
    captioner: &dyn Captioner,
) -> Result<VQAPair> {
    let qa = harmonize_vcr_qa(record, neutral_names, seed)?;
    let image = ImageRef::from_path(&base_dir.join(&record.image_path))?;
    let caption = captioner.caption(&image)?;
    Ok(VQAPair {
        qa,
        image: Some(image),
        caption_prefix: Some(caption),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> VcrText {
        VcrText::Tokens(s.split(' ').map(|w| VcrToken::Word(w.into())).collect())
    }

    fn record(answer: usize) -> VcrRecord {
        VcrRecord {
            id: Some("r1".into()),
            question_tokens: VcrText::Tokens(vec![
                VcrToken::People(vec![1]),
                VcrToken::Word("waves".into()),
                VcrToken::Word("at".into()),
                VcrToken::People(vec![0]),
                VcrToken::Word("?".into()),
            ]),
            choices: vec![words("hello"), words("goodbye"), words("to leave"), words("to stay")],
            answer_index: answer,
            image_path: "img.png".into(),
            person_boxes: None,
        }
    }

    #[test]
    fn bracketed_indices_become_names() {
        let names = ["Jordan", "Taylor"];
        let text = VcrText::Plain("[1] waves at [0]".into());
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        assert_eq!(render_vcr_text(&text, &names).unwrap(), "Taylor waves at Jordan");
        let q = harmonize_vcr_qa(&record(0), &["Jordan", "Taylor"], 1).unwrap();
        assert_eq!(q.question, "Taylor waves at Jordan?");
    }

    #[test]
    fn indices_wrap_and_groups_join() {
        let names: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let text = VcrText::Tokens(vec![
            VcrToken::People(vec![3, 4, 2]),
            VcrToken::Word("sit".into()),
        ]);
        assert_eq!(render_vcr_text(&text, &names).unwrap(), "A, B and C sit");
    }

    #[test]
    fn gold_survives_every_seed() {
        for answer in 0..4 {
            let rec = record(answer);
            let gold = render_vcr_text(&rec.choices[answer], &["x".to_string()]).unwrap();
            for seed in 0..50 {
                let q = harmonize_vcr_qa(&rec, DEFAULT_NEUTRAL_NAMES, seed).unwrap();
                assert_eq!(q.choices.len(), 3);
                assert_eq!(q.gold(), gold);
            }
        }
    }

    #[test]
    fn drop_is_deterministic() {
        let a = harmonize_vcr_qa(&record(3), DEFAULT_NEUTRAL_NAMES, 9).unwrap();
        let b = harmonize_vcr_qa(&record(3), DEFAULT_NEUTRAL_NAMES, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_records() {
        let mut r = record(0);
        r.choices.pop();
        assert!(matches!(harmonize_vcr_qa(&r, DEFAULT_NEUTRAL_NAMES, 0), Err(Error::Schema { .. })));
        let mut r = record(0);
        r.answer_index = 4;
        assert!(matches!(harmonize_vcr_qa(&r, DEFAULT_NEUTRAL_NAMES, 0), Err(Error::Schema { .. })));
        let mut r = record(0);
        r.choices[1] = words("hello");
        r.choices[2] = words("hello");
        r.choices[3] = words("hello");
        assert!(harmonize_vcr_qa(&r, DEFAULT_NEUTRAL_NAMES, 0).is_err());
    }

    #[test]
    fn record_parses_from_vcr_json() {
        let line = r#"{"question_tokens":[[0],"is","holding","what","?"],"choices":[["a","cup"],["a","pen"],[[1],"'s","hat"],"a dog"],"answer_index":2,"image_path":"x.png","person_boxes":[[0,0,1,1]]}"#;
        let r: VcrRecord = serde_json::from_str(line).unwrap();
        let q = harmonize_vcr_qa(&r, &["Jordan", "Taylor"], 0).unwrap();
        assert_eq!(q.question, "Jordan is holding what?");
        assert_eq!(q.gold(), "Taylor's hat");
    }
}
