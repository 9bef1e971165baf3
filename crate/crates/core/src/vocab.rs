//! The shared 90-token character inventory and text normalization.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Canonical inventory, one token per line; index = line number.
pub const CANONICAL_VOCAB: &str = include_str!("../data/vocab.txt");

pub const VOCAB_SIZE: usize = 90;
pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const SPACE: usize = 3;

const SPECIAL_NAMES: [&str; 4] = ["<sos>", "<eos>", "<unk>", "<space>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn canonical() -> Self {
        Self::parse(CANONICAL_VOCAB).expect("shipped vocabulary is valid")
    }

    /// Parses the line-per-token file format.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() != VOCAB_SIZE {
            return Err(Error::corrupt(
                "vocabulary",
                format!("expected {VOCAB_SIZE} tokens, found {}", tokens.len()),
            ));
        }
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if tokens[i] != *name {
                return Err(Error::corrupt(
                    "vocabulary",
                    format!("line {} must be {name}, found {:?}", i + 1, tokens[i]),
                ));
            }
        }
        let mut index = HashMap::new();
        index.insert(' ', SPACE);
        for (i, tok) in tokens.iter().enumerate().skip(SPECIAL_NAMES.len()) {
            let mut chars = tok.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(Error::corrupt(
                    "vocabulary",
                    format!("line {} is not a single character: {tok:?}", i + 1),
                ));
            };
            if index.insert(c, i).is_some() {
                return Err(Error::corrupt("vocabulary", format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn to_file_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Maps each character to its index; characters outside the inventory
    /// become [`UNK`].
    pub fn encode(&self, s: &str) -> Vec<usize> {
        s.chars().map(|c| self.index_of(c).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &i in ids {
            match i {
                SOS | EOS => {}
                UNK => out.push_str("<unk>"),
                SPACE => out.push(' '),
                i if i < self.tokens.len() => out.push_str(&self.tokens[i]),
                i => {
                    return Err(Error::corrupt(
                        "token sequence",
                        format!("index {i} outside vocabulary of {}", self.tokens.len()),
                    ))
                }
            }
        }
        Ok(out)
    }

    /// Every character of the inventory (excluding the reserved tokens).
    pub fn alphabet(&self) -> Vec<char> {
        let mut v: Vec<(usize, char)> = self.index.iter().map(|(&c, &i)| (i, c)).collect();
        v.sort_unstable();
        v.into_iter().map(|(_, c)| c).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Source,
    Target,
}

/// A target or input sequence: body tokens only, never SOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub id: String,
    pub tokens: Vec<usize>,
    pub language: Language,
}

impl TokenSequence {
    pub fn new(id: impl Into<String>, tokens: Vec<usize>, language: Language) -> Result<Self> {
        validate_body(&tokens, VOCAB_SIZE)?;
        Ok(TokenSequence {
            id: id.into(),
            tokens,
            language,
        })
    }

    pub fn encode(id: impl Into<String>, text: &str, vocab: &Vocabulary, language: Language) -> Self {
        TokenSequence {
            id: id.into(),
            tokens: vocab.encode(text),
            language,
        }
    }
}

/// Checks that a body has no SOS/EOS and all indices are below `vocab_size`.
pub fn validate_body(tokens: &[usize], vocab_size: usize) -> Result<()> {
    for (pos, &t) in tokens.iter().enumerate() {
        if t == SOS || t == EOS {
            return Err(Error::Input(format!(
                "reserved token {t} inside sequence body at position {pos}"
            )));
        }
        if t >= vocab_size {
            return Err(Error::Input(format!(
                "token {t} at position {pos} outside vocabulary of {vocab_size}"
            )));
        }
    }
    Ok(())
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '’' | '‘')
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '¿' | '¡' | '«' | '»' | '—' | '–' | '…' | '“' | '”' | '„' | '·' | '‹' | '›'
        )
}

/// Lowercases, removes punctuation other than apostrophes, and collapses
/// whitespace. Curly apostrophes become `'`.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        if c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if is_apostrophe(c) {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push('\'');
            continue;
        }
        if is_punctuation(c) {
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.extend(c.to_lowercase());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_inventory() {
        let v = Vocabulary::canonical();
        assert_eq!(v.len(), 90);
        for c in "abcdefghijklmnopqrstuvwxyzáéíóúüñ0123456789 '".chars() {
            assert!(v.index_of(c).is_some(), "missing {c:?}");
        }
        assert_eq!(v.index_of(' '), Some(SPACE));
        assert_eq!(
            v.hash_hex(),
            "87dbfda570b5264c615d6faef9e78ab18b26aaa82ac7b7b2cf56901e91e7cd35"
        );
        assert_eq!(Vocabulary::parse(&v.to_file_text()).unwrap(), v);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_text("¿Qué tal?"), "qué tal");
        assert_eq!(normalize_text("don't STOP."), "don't stop");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  hola ,  mundo  "), "hola mundo");
        assert_eq!(normalize_text("it’s"), "it's");
    }

    #[test]
    fn encode_decode_examples() {
        let v = Vocabulary::canonical();
        assert_eq!(v.decode(&v.encode("hola")).unwrap(), "hola");
        let e = v.encode("hola☃");
        assert_eq!(e.iter().filter(|&&t| t == UNK).count(), 1);
        assert_eq!(v.encode("a b").len(), 3);
        assert!(matches!(v.decode(&[90]), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn token_sequence_rejects_reserved() {
        assert!(TokenSequence::new("x", vec![5, EOS], Language::Target).is_err());
        assert!(TokenSequence::new("x", vec![SOS], Language::Target).is_err());
        assert!(TokenSequence::new("x", vec![5, 6], Language::Target).is_ok());
    }

    proptest! {
        #[test]
        fn round_trip_in_vocabulary(idx in prop::collection::vec(0usize..1000, 0..40)) {
            let v = Vocabulary::canonical();
            let alpha = v.alphabet();
            let s: String = idx.iter().map(|i| alpha[i % alpha.len()]).collect();
            prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
        }

        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
        }
    }
}
