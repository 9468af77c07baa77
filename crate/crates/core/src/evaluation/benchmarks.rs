//! Loaders that normalize public multiple-choice benchmark files into
//! [`QAPair`]s.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{PairSource, QAPair};
use crate::error::{Error, Result};
use crate::text::digest_parts;

/// Line format of a benchmark file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkFormat {
    /// `{id, question, choices, answer_index}`, the normalized form itself.
    Normalized,
    /// `{id, question: {stem, choices: [{label, text}]}, answerKey}` as used
    /// by CSQA, ARC, QASC and OpenBookQA.
    Stem,
    /// `{goal, sol1, sol2, label}`.
    Piqa,
    /// `{context, question, answerA, answerB, answerC, label}` with a
    /// 1-based label.
    Siqa,
    /// `{sentence, option1, option2, answer}` with a 1-based answer.
    Winogrande,
    /// `{obs1, obs2, hyp1, hyp2, label}` with a 1-based label.
    Anli,
    /// `{question, distractor1..3, correct_answer}`. The gold position is
    /// derived from a hash of the question so it is stable across runs.
    Sciq,
}

impl BenchmarkFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkFormat::Normalized => "normalized",
            BenchmarkFormat::Stem => "stem",
            BenchmarkFormat::Piqa => "piqa",
            BenchmarkFormat::Siqa => "siqa",
            BenchmarkFormat::Winogrande => "winogrande",
            BenchmarkFormat::Anli => "anli",
            BenchmarkFormat::Sciq => "sciq",
        }
    }

    /// Adapter used for a benchmark name when none is given.
    pub fn for_benchmark(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "csqa" | "commonsenseqa" | "arce" | "arcc" | "arc" | "qasc" | "obqa" | "openbookqa" => {
                BenchmarkFormat::Stem
            }
            "piqa" => BenchmarkFormat::Piqa,
            "siqa" | "socialiqa" => BenchmarkFormat::Siqa,
            "wg" | "winogrande" => BenchmarkFormat::Winogrande,
            "anli" | "αnli" => BenchmarkFormat::Anli,
            "sciq" => BenchmarkFormat::Sciq,
            _ => return None,
        })
    }
}

impl fmt::Display for BenchmarkFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "normalized" | "jsonl" => BenchmarkFormat::Normalized,
            "stem" | "csqa" | "arc" | "qasc" => BenchmarkFormat::Stem,
            "piqa" => BenchmarkFormat::Piqa,
            "siqa" => BenchmarkFormat::Siqa,
            "winogrande" | "wg" => BenchmarkFormat::Winogrande,
            "anli" => BenchmarkFormat::Anli,
            "sciq" => BenchmarkFormat::Sciq,
            _ => return Err(Error::invalid(format!("unknown benchmark format `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub format: BenchmarkFormat,
    pub n_choices: usize,
    pub paths: Vec<PathBuf>,
}

impl BenchmarkSpec {
    pub fn new(name: &str, format: BenchmarkFormat, n_choices: usize, path: impl Into<PathBuf>) -> Self {
        Self {
            name: name.to_string(),
            format,
            n_choices,
            paths: vec![path.into()],
        }
    }
}

/// Reads every file of the benchmark in order. Item ids default to
/// `<name>-<n>` where the source has none.
pub fn load_benchmark(spec: &BenchmarkSpec) -> Result<Vec<QAPair>> {
    if spec.n_choices < 2 {
        return Err(Error::invalid("a benchmark needs at least two choices"));
    }
    let mut out = Vec::new();
    for path in &spec.paths {
        let file = std::fs::File::open(path).map_err(|e| Error::storage(path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::storage(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let fail = |m: String| Error::schema(Some(lineno), format!("{}: {m}", path.display()));
            let value: Value = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
            let default_id = format!("{}-{}", spec.name, out.len());
            let qa = normalize(spec.format, &value, default_id).map_err(fail)?;
            if qa.choices.len() != spec.n_choices {
                return Err(fail(format!(
                    "expected {} choices, found {}",
                    spec.n_choices,
                    qa.choices.len()
                )));
            }
            qa.validate().map_err(|e| fail(e.to_string()))?;
            out.push(qa);
        }
    }
    Ok(out)
}

fn field<'a>(v: &'a Value, key: &str) -> std::result::Result<&'a Value, String> {
    v.get(key).ok_or_else(|| format!("missing field `{key}`"))
}

fn string(v: &Value, key: &str) -> std::result::Result<String, String> {
    field(v, key)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("field `{key}` is not a string"))
}

/// Integer labels may arrive as numbers or numeric strings.
fn label(v: &Value, key: &str) -> std::result::Result<i64, String> {
    let f = field(v, key)?;
    f.as_i64()
        .or_else(|| f.as_str().and_then(|s| s.trim().parse().ok()))
        .ok_or_else(|| format!("field `{key}` is not an integer label"))
}

fn one_based(v: &Value, key: &str, n: usize) -> std::result::Result<usize, String> {
    let l = label(v, key)?;
    if l < 1 || l as usize > n {
        return Err(format!("label {l} outside 1..={n}"));
    }
    Ok(l as usize - 1)
}

fn id_or(v: &Value, default: String) -> String {
    match v.get("id").or_else(|| v.get("qID")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => default,
    }
}

fn normalize(format: BenchmarkFormat, v: &Value, default_id: String) -> std::result::Result<QAPair, String> {
    let id = id_or(v, default_id);
    let (question, choices, answer_index) = match format {
        BenchmarkFormat::Normalized => {
            let choices: Vec<String> = serde_json::from_value(field(v, "choices")?.clone())
                .map_err(|e| format!("choices: {e}"))?;
            let idx = label(v, "answer_index")?;
            if idx < 0 {
                return Err(format!("answer_index {idx} is negative"));
            }
            (string(v, "question")?, choices, idx as usize)
        }
        BenchmarkFormat::Stem => {
            let q = field(v, "question")?;
            let stem = string(q, "stem")?;
            let raw = field(q, "choices")?
                .as_array()
                .ok_or("question.choices is not an array")?;
            let mut labels = Vec::with_capacity(raw.len());
            let mut choices = Vec::with_capacity(raw.len());
            for c in raw {
                labels.push(string(c, "label")?);
                choices.push(string(c, "text")?);
            }
            let key = string(v, "answerKey")?;
            let idx = labels
                .iter()
                .position(|l| *l == key)
                .ok_or_else(|| format!("answerKey `{key}` matches no choice label"))?;
            (stem, choices, idx)
        }
        BenchmarkFormat::Piqa => {
            let choices = vec![string(v, "sol1")?, string(v, "sol2")?];
            let l = label(v, "label")?;
            if !(0..=1).contains(&l) {
                return Err(format!("label {l} outside 0..=1"));
            }
            (string(v, "goal")?, choices, l as usize)
        }
        BenchmarkFormat::Siqa => {
            let question = format!("{} {}", string(v, "context")?, string(v, "question")?);
            let choices = vec![string(v, "answerA")?, string(v, "answerB")?, string(v, "answerC")?];
            (question, choices, one_based(v, "label", 3)?)
        }
        BenchmarkFormat::Winogrande => {
            let choices = vec![string(v, "option1")?, string(v, "option2")?];
            (string(v, "sentence")?, choices, one_based(v, "answer", 2)?)
        }
        BenchmarkFormat::Anli => {
            let question = format!("{} {}", string(v, "obs1")?, string(v, "obs2")?);
            let choices = vec![string(v, "hyp1")?, string(v, "hyp2")?];
            (question, choices, one_based(v, "label", 2)?)
        }
        BenchmarkFormat::Sciq => {
            let question = string(v, "question")?;
            let mut choices = vec![
                string(v, "distractor1")?,
                string(v, "distractor2")?,
                string(v, "distractor3")?,
            ];
            let h = digest_parts(&[b"sciq", question.as_bytes()]);
            let gold = h[0] as usize % (choices.len() + 1);
            choices.insert(gold, string(v, "correct_answer")?);
            (question, choices, gold)
        }
    };
    Ok(QAPair {
        id,
        question,
        choices,
        answer_index,
        source: PairSource::Benchmark,
    })
}
