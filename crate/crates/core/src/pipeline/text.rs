//! Whitespace-and-punctuation tokenizer, fitted vocabulary, and multi-field
//! sequence assembly with longest-field-first truncation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNKNOWN: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const N_SPECIAL: usize = 4;

/// Tokens kept in the vocabulary must occur at least this often.
pub const MIN_TOKEN_FREQ: usize = 2;

/// Lowercases and splits on whitespace; every punctuation character is a
/// token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Sorted token list; id of `tokens[i]` is `i + 4` after the specials
/// PAD, UNKNOWN, CLS, SEP.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TextVocab {
    tokens: Vec<String>,
}

impl TextVocab {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .map(|(t, _)| t)
            .collect();
        tokens.sort();
        TextVocab { tokens }
    }

    /// Vocabulary size including the special tokens.
    pub fn len(&self) -> usize {
        self.tokens.len() + N_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .map_or(UNKNOWN, |i| i + N_SPECIAL)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        match id {
            PAD => "[PAD]",
            UNKNOWN => "[UNK]",
            CLS => "[CLS]",
            SEP => "[SEP]",
            i => self
                .tokens
                .get(i - N_SPECIAL)
                .map_or("[UNK]", String::as_str),
        }
    }
}

/// Sequence of field indices from which one tail token is removed, in
/// removal order, until the total length fits `budget`. Each removal hits
/// the currently longest field, the lowest index among ties.
pub fn truncation_removals(lengths: &[usize], budget: usize) -> Vec<usize> {
    let mut lens = lengths.to_vec();
    let mut total: usize = lens.iter().sum();
    let mut removed = Vec::with_capacity(total.saturating_sub(budget));
    while total > budget {
        let mut longest = 0;
        for (i, &l) in lens.iter().enumerate() {
            if l > lens[longest] {
                longest = i;
            }
        }
        lens[longest] -= 1;
        total -= 1;
        removed.push(longest);
    }
    removed
}

/// Per-field lengths after truncating to `budget` content tokens.
pub fn truncated_lengths(lengths: &[usize], budget: usize) -> Vec<usize> {
    let mut lens = lengths.to_vec();
    for i in truncation_removals(lengths, budget) {
        lens[i] -= 1;
    }
    lens
}

/// Lays out `[CLS] f1 [SEP] f2 [SEP] ...`, first dropping tail tokens of the
/// longest field until the whole sequence fits `max_len`.
pub fn tokenize_and_truncate(fields: &[Vec<usize>], max_len: usize) -> Result<Vec<usize>> {
    let specials = fields.len() + 1;
    if max_len < specials {
        return Err(Error::InvalidConfig(format!(
            "max_len {max_len} leaves no room for {} fields and their separators",
            fields.len()
        )));
    }
    let lengths: Vec<usize> = fields.iter().map(Vec::len).collect();
    let keep = truncated_lengths(&lengths, max_len - specials);
    let mut out = Vec::with_capacity(max_len);
    out.push(CLS);
    for (f, &k) in fields.iter().zip(&keep) {
        out.extend_from_slice(&f[..k]);
        out.push(SEP);
    }
    Ok(out)
}
