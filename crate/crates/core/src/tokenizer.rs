// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level tokenizer over a bundle vocabulary.
//!
//! Text is split into pieces the way byte-level BPE pre-tokenizers do (an
//! optional leading space glued to a run of letters, digits or punctuation)
//! and each piece is looked up verbatim. Bundles exported from real
//! checkpoints carry token ids directly; this tokenizer only has to cover the
//! synthetic vocabularies.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;

use crate::analytics::ioi::{DEFAULT_NAMES, DEFAULT_OBJECTS, DEFAULT_PLACES, LOW_LEVEL_TEMPLATES};
use crate::error::{Error, Result};

/// Id reserved for unknown pieces in synthetic vocabularies.
pub const UNK: &str = "<unk>";

fn piece_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r" ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+").expect("static regex")
    })
}

/// Splits text into vocabulary-lookup pieces.
pub fn pieces(text: &str) -> Vec<&str> {
    piece_regex().find_iter(text).map(|m| m.as_str()).collect()
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    unk: Option<u32>,
}

impl Tokenizer {
    pub fn new(vocab: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            index.entry(tok.clone()).or_insert(i as u32);
        }
        let unk = index.get(UNK).copied();
        Self { vocab, index, unk }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        pieces(text)
            .into_iter()
            .map(|p| match self.index.get(p) {
                Some(&id) => Ok(id),
                None => self.unk.ok_or_else(|| Error::UnknownToken(p.to_string())),
            })
            .collect()
    }

    pub fn token_id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn decode_token(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.decode_token(i).to_string()).collect()
    }
}

/// Vocabulary used by synthetic bundles: `<unk>`, every piece of the IOI
/// templates (with and without a leading space) and the default word lists,
/// padded with `tok{i}` entries up to `size` when `size` is larger.
pub fn toy_vocab(size: Option<usize>) -> Vec<String> {
    let mut words = BTreeSet::new();
    for template in LOW_LEVEL_TEMPLATES {
        let plain = template
            .replace("[A]", "")
            .replace("[B]", "")
            .replace("[PLACE]", "")
            .replace("[OBJECT]", "");
        for p in pieces(&plain) {
            let t = p.trim_start();
            if !t.is_empty() {
                words.insert(t.to_string());
                words.insert(format!(" {t}"));
            }
        }
    }
    for w in DEFAULT_NAMES.iter().chain(DEFAULT_PLACES).chain(DEFAULT_OBJECTS) {
        words.insert(w.to_string());
        words.insert(format!(" {w}"));
    }
    let mut vocab = vec![UNK.to_string()];
    vocab.extend(words);
    if let Some(size) = size {
        let mut i = 0;
        while vocab.len() < size {
            vocab.push(format!(" tok{i}"));
            i += 1;
        }
        vocab.truncate(size.max(1));
    }
    vocab
}
