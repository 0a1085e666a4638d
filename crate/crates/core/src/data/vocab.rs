use std::collections::HashMap;

use sha2::{Digest, Sha256};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[EOS]", "[UNK]"];

/// Word-level vocabulary with the special tokens pinned to ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary words; duplicates keep their first id.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for s in SPECIAL_TOKENS {
            v.insert(s);
        }
        for w in words {
            v.insert(&w.as_ref().to_lowercase());
        }
        v
    }

    /// Rebuilds from a full token list as stored in files (specials included).
    pub fn from_token_list(tokens: &[String]) -> Result<Self, String> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err("token list does not start with the special tokens".into());
        }
        let v = Self::from_words(&tokens[SPECIAL_TOKENS.len()..]);
        if v.tokens != tokens {
            return Err("token list contains duplicates or upper-case entries".into());
        }
        Ok(v)
    }

    fn insert(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len());
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIAL_TOKENS[UNK], String::as_str)
    }

    /// Lowercase, whitespace split, unknown words to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase())).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Hex SHA-256 over the ordered token list; identifies a vocabulary across files.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
