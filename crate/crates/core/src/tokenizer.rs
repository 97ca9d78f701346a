//! Prompt tokenization.
//!
//! Token index 0 is always the start-of-text token and the last index is the
//! end-of-text token, so concept spans never start at 0.

use std::ops::Range;

use crate::error::{Error, Result};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    /// Normalized (lowercase) token text; empty for the special tokens.
    pub text: String,
    /// Byte range in the source text; `None` for the special tokens.
    pub source: Option<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: Vec<Token>,
}

impl Tokenized {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    /// Finds the first contiguous run of tokens whose texts equal `needle`.
    pub fn find_span(&self, needle: &[String]) -> Option<Range<usize>> {
        if needle.is_empty() || needle.len() > self.tokens.len() {
            return None;
        }
        (0..=self.tokens.len() - needle.len()).find_map(|start| {
            let hit = needle
                .iter()
                .zip(&self.tokens[start..])
                .all(|(n, t)| t.source.is_some() && &t.text == n);
            hit.then(|| start..start + needle.len())
        })
    }

    /// Byte range in the source text covered by a token span.
    pub fn byte_range(&self, span: &Range<usize>) -> Option<Range<usize>> {
        let first = self.tokens.get(span.start)?.source.clone()?;
        let last = self.tokens.get(span.end.checked_sub(1)?)?.source.clone()?;
        Some(first.start..last.end)
    }
}

pub trait Tokenizer: Send + Sync {
    /// Maximum tokenized length, special tokens included.
    fn max_len(&self) -> usize;

    /// Splits text into normalized pieces without special tokens or ids.
    fn pieces(&self, text: &str) -> Vec<(String, Range<usize>)>;

    fn token_id(&self, piece: &str) -> u32;

    fn tokenize(&self, text: &str) -> Result<Tokenized> {
        let pieces = self.pieces(text);
        let len = pieces.len() + 2;
        if len > self.max_len() {
            return Err(Error::PromptTooLong {
                len,
                max: self.max_len(),
            });
        }
        let mut tokens = Vec::with_capacity(len);
        tokens.push(Token {
            id: BOS_ID,
            text: String::new(),
            source: None,
        });
        for (piece, range) in pieces {
            tokens.push(Token {
                id: self.token_id(&piece),
                text: piece,
                source: Some(range),
            });
        }
        tokens.push(Token {
            id: EOS_ID,
            text: String::new(),
            source: None,
        });
        Ok(Tokenized { tokens })
    }

    fn normalize(&self, text: &str) -> Vec<String> {
        self.pieces(text).into_iter().map(|(p, _)| p).collect()
    }
}

/// Word-level tokenizer with a hashed vocabulary.
///
/// Runs of alphanumerics and underscores form one token; any other
/// non-whitespace character is a token of its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTokenizer {
    pub vocab_size: u32,
    pub max_len: usize,
}

impl Default for WordTokenizer {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            max_len: 32,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl Tokenizer for WordTokenizer {
    fn max_len(&self) -> usize {
        self.max_len
    }

    fn pieces(&self, text: &str) -> Vec<(String, Range<usize>)> {
        let is_word = |c: char| c.is_alphanumeric() || c == '_';
        let mut out = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if is_word(c) {
                word_start.get_or_insert(i);
                continue;
            }
            if let Some(s) = word_start.take() {
                out.push((text[s..i].to_lowercase(), s..i));
            }
            if !c.is_whitespace() {
                let end = i + c.len_utf8();
                out.push((text[i..end].to_string(), i..end));
            }
        }
        if let Some(s) = word_start {
            out.push((text[s..].to_lowercase(), s..text.len()));
        }
        out
    }

    fn token_id(&self, piece: &str) -> u32 {
        2 + (fnv1a(piece.as_bytes()) % u64::from(self.vocab_size - 2)) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_and_punctuation() {
        let tok = WordTokenizer::default();
        let t = tok.tokenize("A cat, eager to explore.").unwrap();
        let texts: Vec<_> = t.tokens.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["", "a", "cat", ",", "eager", "to", "explore", ".", ""]);
        assert_eq!(t.tokens[0].id, BOS_ID);
        assert_eq!(t.tokens.last().unwrap().id, EOS_ID);
    }

    #[test]
    fn ids_are_case_insensitive() {
        let tok = WordTokenizer::default();
        assert_eq!(tok.token_id("cat"), tok.tokenize("CAT").unwrap().tokens[1].id);
    }

    #[test]
    fn too_long() {
        let tok = WordTokenizer {
            vocab_size: 64,
            max_len: 4,
        };
        assert!(tok.tokenize("a b").is_ok());
        assert!(matches!(
            tok.tokenize("a b c"),
            Err(Error::PromptTooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn span_search() {
        let tok = WordTokenizer::default();
        let t = tok.tokenize("a plushie bunny and a flower").unwrap();
        let span = t.find_span(&tok.normalize("plushie bunny")).unwrap();
        assert_eq!(span, 2..4);
        assert_eq!(t.byte_range(&span), Some(2..15));
        assert!(t.find_span(&tok.normalize("dog")).is_none());
    }
}
