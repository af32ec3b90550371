//! Word-level vocabulary for the toy corpus. Owns every special token.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::OcrDocument;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const DEC: &str = "<dec>";
pub const CLS: &str = "<cls>";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const DEC_ID: u32 = 2;
pub const CLS_ID: u32 = 3;
const FIRST_SENTINEL_ID: u32 = 4;

pub fn sentinel_token(i: usize) -> String {
    format!("<extra_id_{i}>")
}

/// Parses `<extra_id_N>` into `N`.
pub fn parse_sentinel(token: &str) -> Option<usize> {
    let digits = token.strip_prefix("<extra_id_")?.strip_suffix('>')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// True for any string reserved by the tokenizer, regardless of vocabulary size.
pub fn is_special_token(token: &str) -> bool {
    matches!(token, PAD | UNK | DEC | CLS) || parse_sentinel(token).is_some()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_word: Vec<String>,
    word_to_id: HashMap<String, u32>,
    n_sentinels: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    specials: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_words(n_sentinels: usize, words: Vec<String>) -> Self {
        let mut id_to_word: Vec<String> =
            [PAD, UNK, DEC, CLS].iter().map(|s| s.to_string()).collect();
        id_to_word.extend((0..n_sentinels).map(sentinel_token));
        id_to_word.extend(words);
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary {
            id_to_word,
            word_to_id,
            n_sentinels,
        }
    }

    /// Rebuild from the non-special words in id order.
    pub fn from_parts(n_sentinels: usize, words: Vec<String>) -> Result<Self> {
        if let Some(w) = words.iter().find(|w| is_special_token(w)) {
            return Err(Error::Validation(format!(
                "vocabulary word {w:?} is a special token"
            )));
        }
        let vocab = Self::from_words(n_sentinels, words);
        if vocab.word_to_id.len() != vocab.id_to_word.len() {
            return Err(Error::Validation("duplicate words in vocabulary".into()));
        }
        Ok(vocab)
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.id_to_word[self.n_special()..]
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_word.is_empty()
    }

    pub fn n_sentinels(&self) -> usize {
        self.n_sentinels
    }

    /// Number of reserved ids (PAD, UNK, DEC, CLS and the sentinels).
    pub fn n_special(&self) -> usize {
        FIRST_SENTINEL_ID as usize + self.n_sentinels
    }

    pub fn sentinel_id(&self, i: usize) -> Result<u32> {
        if i >= self.n_sentinels {
            return Err(Error::Capacity(format!(
                "sentinel index {i} exceeds vocabulary capacity of {}",
                self.n_sentinels
            )));
        }
        Ok(FIRST_SENTINEL_ID + i as u32)
    }

    pub fn is_sentinel_id(&self, id: u32) -> bool {
        (FIRST_SENTINEL_ID..FIRST_SENTINEL_ID + self.n_sentinels as u32).contains(&id)
    }

    pub fn id(&self, word: &str) -> u32 {
        self.word_to_id.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> &str {
        self.id_to_word
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK)
    }

    /// Encode tokens; sentinel strings beyond capacity are an error, other
    /// unknown words map to UNK.
    pub fn encode_tokens(&self, tokens: &[String]) -> Result<Vec<u32>> {
        tokens
            .iter()
            .map(|t| match parse_sentinel(t) {
                Some(i) => self.sentinel_id(i),
                None => Ok(self.id(t)),
            })
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// `[(i, "a b")]` becomes `[EXTRA_ID_i, id(a), id(b)]`, repeated per pair.
    pub fn encode_target(&self, target: &[(usize, String)]) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for (i, text) in target {
            out.push(self.sentinel_id(*i)?);
            out.extend(self.encode_text(text));
        }
        Ok(out)
    }

    /// Inverse of [`Vocabulary::encode_target`]. Words before the first
    /// sentinel are dropped.
    pub fn decode_target(&self, ids: &[u32]) -> Vec<(usize, String)> {
        let mut out: Vec<(usize, Vec<&str>)> = Vec::new();
        for &id in ids {
            if self.is_sentinel_id(id) {
                out.push(((id - FIRST_SENTINEL_ID) as usize, Vec::new()));
            } else if let Some((_, words)) = out.last_mut() {
                words.push(self.word(id));
            }
        }
        out.into_iter().map(|(i, w)| (i, w.join(" "))).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let n_special = self.n_special();
        let file = VocabFile {
            words: self.id_to_word[n_special..].to_vec(),
            specials: self.id_to_word[..n_special]
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), i as u32))
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let n_sentinels = file
            .specials
            .len()
            .checked_sub(FIRST_SENTINEL_ID as usize)
            .ok_or_else(|| Error::Validation("vocabulary file lacks core specials".into()))?;
        let vocab = Self::from_words(n_sentinels, file.words);
        for (name, id) in &file.specials {
            if vocab.word_to_id.get(name) != Some(id) {
                return Err(Error::Validation(format!(
                    "special token {name} has id {id}, expected the reserved layout"
                )));
            }
        }
        if vocab.word_to_id.len() != vocab.id_to_word.len() {
            return Err(Error::Validation("duplicate words in vocabulary".into()));
        }
        Ok(vocab)
    }
}

/// Words with `count >= min_count`, ordered by descending frequency then
/// lexicographically, after the reserved prefix.
pub fn build_vocab(docs: &[OcrDocument], min_count: usize, n_sentinels: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        for t in &doc.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut words: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(w, c)| c >= min_count && !is_special_token(w))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_words(
        n_sentinels,
        words.into_iter().map(|(w, _)| w.to_string()).collect(),
    )
}
