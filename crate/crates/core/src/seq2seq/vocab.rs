use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Bijective token/index mapping with the reserved tokens at indices 0-3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids plus a flag per position marking words that fell back to UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unk: Vec<bool>,
}

impl Vocabulary {
    /// Builds a vocabulary from content words; reserved tokens are prepended.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its full token list (reserved tokens included).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Vocabulary(
                "reserved tokens must occupy indices 0-3".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
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

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps words to ids, substituting UNK for unknown words.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Encoded {
        let mut ids = Vec::with_capacity(words.len());
        let mut unk = Vec::with_capacity(words.len());
        for w in words {
            match self.id(w.as_ref()) {
                Some(id) => {
                    ids.push(id);
                    unk.push(false);
                }
                None => {
                    ids.push(UNK);
                    unk.push(true);
                }
            }
        }
        Encoded { ids, unk }
    }

    /// Maps ids back to words; ids outside the vocabulary render as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}
