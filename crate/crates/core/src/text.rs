//! Tokenization and hashing helpers shared by the stubs, the dataset builder
//! and the toy model.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "to", "of", "and", "or", "in", "on", "at", "for", "with", "by", "from",
    "is", "are", "was", "were", "be", "been", "as", "that", "this", "it", "its", "then", "so",
    "result", "because", "before", "after", "wanted", "wants", "needed", "feels", "feel", "seen",
    "others", "person", "personx", "persony", "personz", "what", "who", "why", "how", "which",
    "do", "does", "did", "he", "she", "they", "them", "his", "her", "their", "into", "up", "out",
];

/// Lowercased word tokens; punctuation splits tokens and is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .map(|t| t.trim_matches(|c| c == '\'' || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Tokens carrying content, in order of first appearance, without repeats.
pub fn content_words(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for tok in tokenize(text) {
        if !is_stopword(&tok) && !out.contains(&tok) {
            out.push(tok);
        }
    }
    out
}

/// Hex SHA-256 of the given bytes.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a sequence of fields; fields are length-prefixed so that
/// `["ab", "c"]` and `["a", "bc"]` differ.
pub fn digest_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest_parts(parts))
}

/// Uniform value in [0, 1) derived from a hash.
pub fn unit_from_hash(hash: &[u8; 32]) -> f64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&hash[..8]);
    (u64::from_le_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("PersonX eats breakfast. As a result, PersonX wanted to"),
            vec!["personx", "eats", "breakfast", "as", "a", "result", "personx", "wanted", "to"]
        );
        assert_eq!(tokenize("don't  stop-now!"), vec!["don't", "stop-now"]);
        assert!(tokenize(" .,; ").is_empty());
    }

    #[test]
    fn content_words_drop_stopwords_and_repeats() {
        assert_eq!(
            content_words("to wash the dishes and the dishes"),
            vec!["wash", "dishes"]
        );
    }

    #[test]
    fn digest_parts_is_length_prefixed() {
        assert_ne!(digest_parts(&[b"ab", b"c"]), digest_parts(&[b"a", b"bc"]));
    }

    #[test]
    fn unit_from_hash_in_range() {
        for i in 0..100u32 {
            let u = unit_from_hash(&digest_parts(&[&i.to_le_bytes()]));
            assert!((0.0..1.0).contains(&u));
        }
    }
}
