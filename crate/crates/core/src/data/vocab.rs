//! Closed word-level vocabulary built from the corpus grammar.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD, UNK};

pub const FIRST_NAMES: [&str; 8] = ["ada", "bram", "cleo", "dov", "esme", "finn", "gus", "hale"];
pub const LAST_NAMES: [&str; 7] = ["ashby", "brook", "crane", "dunmore", "ellery", "fairfax", "greer"];

/// Attribute kinds every synthetic profile draws from, in fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    BirthCity,
    Genre,
    Award,
    Year,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::BirthCity, Attribute::Genre, Attribute::Award, Attribute::Year];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::BirthCity => "birth-city",
            Attribute::Genre => "genre",
            Attribute::Award => "award",
            Attribute::Year => "year",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn pool(self) -> &'static [&'static str] {
        match self {
            Attribute::BirthCity => &["paris", "lima", "oslo", "cairo", "quito", "hanoi"],
            Attribute::Genre => &["poetry", "satire", "horror", "romance", "fantasy", "mystery"],
            Attribute::Award => &["hugo", "nebula", "pulitzer", "booker", "edgar", "locus"],
            Attribute::Year => &["1961", "1974", "1983", "1990", "2002", "2015"],
        }
    }

    /// Question words around the entity name: `(before, after)`.
    pub fn question(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Attribute::BirthCity => (&["where", "was"], &["born", "?"]),
            Attribute::Genre => (&["what", "does"], &["write", "?"]),
            Attribute::Award => (&["what", "did"], &["win", "?"]),
            Attribute::Year => (&["when", "did"], &["debut", "?"]),
        }
    }
}

/// Surface forms. The short answer is what the model trains on; the
/// paraphrase (and its perturbed variants) restate the value in a longer
/// frame for truth-ratio scoring.
pub const ANSWER_TAIL: &[&str] = &[];
pub const PARAPHRASE_TAIL: &[&str] = &["is", "the", "answer", "."];
pub const DEFAULT_TARGET: &str = "I don't know the answer";

const TEMPLATE_WORDS: &[&str] = &[
    "where", "was", "born", "?", "what", "does", "write", "did", "win", "when", "debut", ".", "is", "the",
    "answer", "I", "don't", "know",
];

/// Bidirectional word ↔ id map. Ids 0..4 are the special tokens.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// The grammar's vocabulary: specials, template words, name parts, then
    /// every attribute's value pool.
    pub fn standard() -> Self {
        let mut words: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        words.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        words.extend(FIRST_NAMES.iter().map(|s| s.to_string()));
        words.extend(LAST_NAMES.iter().map(|s| s.to_string()));
        for a in Attribute::ALL {
            words.extend(a.pool().iter().map(|s| s.to_string()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        debug_assert_eq!(words[PAD as usize], "<pad>");
        debug_assert_eq!(words[BOS as usize], "<bos>");
        debug_assert_eq!(words[EOS as usize], "<eos>");
        debug_assert_eq!(words[UNK as usize], "<unk>");
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Strict tokenization that rejects out-of-vocabulary words.
    pub fn tokenize_strict(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::arg(format!("word `{w}` is not in the vocabulary"))))
            .collect()
    }

    /// Space-joined words, skipping BOS/EOS/PAD.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&t| t != BOS && t != EOS && t != PAD)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_default_model_vocab() {
        let v = Vocabulary::standard();
        assert!(v.len() <= 64, "vocab has {} words", v.len());
        let mut seen = std::collections::HashSet::new();
        for i in 0..v.len() as u32 {
            assert!(seen.insert(v.word(i).to_string()), "duplicate word {}", v.word(i));
        }
    }

    #[test]
    fn target_roundtrip() {
        let v = Vocabulary::standard();
        let ids = v.tokenize_strict(DEFAULT_TARGET).unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(v.detokenize(&ids), DEFAULT_TARGET);
        assert_eq!(v.tokenize("zebra"), vec![UNK]);
        assert!(v.tokenize_strict("zebra").is_err());
    }
}
