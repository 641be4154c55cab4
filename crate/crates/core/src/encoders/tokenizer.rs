//! Lowercasing word/punctuation tokenizer with a fixed vocabulary and
//! hash-bucketed out-of-vocabulary words.

use crate::error::{Error, Result};

/// Words common to the hand-crafted templates get dedicated ids.
const BASE_VOCAB: &[&str] = &[
    "<sot>", "a", "an", "the", "photo", "of", "type", "pet", "flower", "food", "aircraft",
    "texture", "centered", "satellite", "person", "doing", "picture", "image", "in", "on", "with",
    "and", "this", "is", ",", ".", "-", "'",
];

pub const SOT: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    buckets: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { buckets: 1024 }
    }
}

fn fnv1a(word: &str) -> u64 {
    word.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Tokenizer {
    pub fn new(buckets: usize) -> Self {
        Self {
            buckets: buckets.max(1),
        }
    }

    /// Tokenizer whose vocabulary (fixed words plus buckets) has `size` entries.
    pub fn with_vocab_size(size: usize) -> Self {
        Self::new(size.saturating_sub(BASE_VOCAB.len()))
    }

    pub fn vocab_size(&self) -> usize {
        BASE_VOCAB.len() + self.buckets
    }

    /// Splits lowercased text into words and single punctuation marks.
    pub fn split(text: &str) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_control() {
                return Err(Error::Tokenizer(format!("control character {ch:?} in {text:?}")));
            }
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            // underscores stand in for spaces in folder-style names
            if !ch.is_whitespace() && ch != '_' {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        Ok(out)
    }

    pub fn id(&self, word: &str) -> usize {
        match BASE_VOCAB.iter().position(|&w| w == word) {
            Some(i) => i,
            None => BASE_VOCAB.len() + (fnv1a(word) % self.buckets as u64) as usize,
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let words = Self::split(text)?;
        if words.is_empty() {
            return Err(Error::Tokenizer(format!("no tokens in {text:?}")));
        }
        Ok(words.iter().map(|w| self.id(w)).collect())
    }
}

pub const CLS_PLACEHOLDER: &str = "[CLS]";

/// Substitutes `class_name` for the single `[CLS]` placeholder.
pub fn fill_template(template: &str, class_name: &str) -> Result<String> {
    match template.matches(CLS_PLACEHOLDER).count() {
        1 => Ok(template.replace(CLS_PLACEHOLDER, class_name)),
        n => Err(Error::Input(format!(
            "template {template:?} must contain exactly one {CLS_PLACEHOLDER}, found {n}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_substitution() {
        let text = fill_template("a photo of a [CLS].", "dog").unwrap();
        assert_eq!(text, "a photo of a dog.");
        assert_eq!(
            Tokenizer::split(&text).unwrap(),
            vec!["a", "photo", "of", "a", "dog", "."]
        );
        assert!(fill_template("a photo", "dog").is_err());
        assert!(fill_template("[CLS] [CLS]", "dog").is_err());
    }

    #[test]
    fn distinct_classes_distinct_ids() {
        let t = Tokenizer::default();
        let dog = t.encode("a photo of a dog.").unwrap();
        let cat = t.encode("a photo of a cat.").unwrap();
        assert_ne!(dog, cat);
        assert_eq!(dog, t.encode("A Photo of a DOG.").unwrap());
        assert_eq!(t.encode("golden_retriever").unwrap(), t.encode("golden retriever").unwrap());
    }

    #[test]
    fn rejects_unusable_text() {
        let t = Tokenizer::default();
        assert!(matches!(t.encode("   "), Err(Error::Tokenizer(_))));
        assert!(matches!(t.encode("dog\u{7}"), Err(Error::Tokenizer(_))));
    }
}
