//! Character alphabet for transcripts, with a reserved CTC blank index.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ordered character set (lowercase a-z, space, apostrophe) plus a blank
/// index that is not mapped to any character. Index 0..symbols.len() are the
/// characters; `blank_index` sits one past them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    symbols: Vec<char>,
    blank_index: usize,
}

impl Default for Alphabet {
    fn default() -> Self {
        let mut symbols: Vec<char> = ('a'..='z').collect();
        symbols.push(' ');
        symbols.push('\'');
        let blank_index = symbols.len();
        Alphabet {
            symbols,
            blank_index,
        }
    }
}

impl Alphabet {
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Number of character symbols, excluding blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank_index(&self) -> usize {
        self.blank_index
    }

    /// Model output dimension: characters plus blank.
    pub fn n_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        self.symbols.get(index).copied()
    }

    /// Normalize raw text to the alphabet: lowercase, collapse whitespace
    /// runs to single spaces, drop characters outside the symbol set.
    pub fn normalize(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        for c in text.to_lowercase().chars() {
            let c = if c.is_whitespace() { ' ' } else { c };
            if self.index_of(c).is_none() {
                continue;
            }
            if c == ' ' && (out.is_empty() || out.ends_with(' ')) {
                continue;
            }
            out.push(c);
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out
    }

    /// Encode a normalized string as character indices.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index_of(c).ok_or_else(|| {
                    Error::Invalid(format!("character '{c}' not in alphabet"))
                })
            })
            .collect()
    }

    /// Decode character indices back to a string. Blank and out-of-range
    /// indices are rejected.
    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        indices
            .iter()
            .map(|&i| {
                self.char_at(i)
                    .ok_or_else(|| Error::Invalid(format!("index {i} not a character symbol")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_shape() {
        let a = Alphabet::default();
        assert_eq!(a.len(), 28);
        assert_eq!(a.blank_index(), 28);
        assert_eq!(a.n_classes(), 29);
        // no duplicates
        let mut seen = std::collections::HashSet::new();
        assert!(a.symbols().iter().all(|c| seen.insert(*c)));
    }

    #[test]
    fn normalize_examples() {
        let a = Alphabet::default();
        assert_eq!(a.normalize("Hello, World!"), "hello world");
        assert_eq!(a.normalize("  it's   ME  "), "it's me");
        assert_eq!(a.normalize("123"), "");
    }

    #[test]
    fn encode_decode_roundtrip() {
        let a = Alphabet::default();
        let s = "the quick brown fox";
        assert_eq!(a.decode(&a.encode(s).unwrap()).unwrap(), s);
    }

    #[test]
    fn encode_rejects_unknown() {
        let a = Alphabet::default();
        assert!(a.encode("ab?").is_err());
        assert!(a.decode(&[28]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_on_alphabet_strings(s in "[a-z' ]{0,40}") {
            let a = Alphabet::default();
            let n = a.normalize(&s);
            prop_assert_eq!(a.decode(&a.encode(&n).unwrap()).unwrap(), n);
        }
    }
}
