//! Greedy longest-match subword tokenizer over a fixed vocabulary.
//!
//! Words are split on whitespace after lowercasing. Each word is segmented
//! left to right by taking the longest vocabulary entry that matches; every
//! piece after the first carries the `##` continuation prefix.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

const CONTINUATION: &str = "##";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("character {ch:?} in word {word:?} cannot be segmented")]
    UnknownCharacter { word: String, ch: char },
    #[error("duplicate vocabulary entry {token:?} at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("vocabulary is missing special token {0}")]
    MissingSpecial(&'static str),
    #[error("unknown-token handling enabled but vocabulary has no {UNK} entry")]
    MissingUnknown,
    #[error("empty tag")]
    EmptyTag,
    #[error("vocabulary entry at line {0} is empty or contains whitespace")]
    BadEntry(usize),
    #[error("token id {0} is out of range")]
    BadId(TokenId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ids of the reserved tokens every vocabulary must contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

impl SpecialTokens {
    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.cls || id == self.sep || id == self.mask
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, TokenId>,
    special: SpecialTokens,
    unknown: Option<TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary where the position of each entry is its id.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for (line, token) in tokens.into_iter().enumerate() {
            let token: String = token.into();
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(TokenizerError::BadEntry(line));
            }
            if index.insert(token.clone(), line as TokenId).is_some() {
                return Err(TokenizerError::DuplicateToken { token, line });
            }
            entries.push(token);
        }
        let lookup = |name: &'static str| {
            index
                .get(name)
                .copied()
                .ok_or(TokenizerError::MissingSpecial(name))
        };
        let special = SpecialTokens {
            pad: lookup(PAD)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            mask: lookup(MASK)?,
        };
        Ok(Self {
            entries,
            index,
            special,
            unknown: None,
        })
    }

    /// Parses the one-token-per-line format. A trailing newline is optional.
    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        Self::from_tokens(text.lines())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(entry);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        crate::io::write_atomic(path.as_ref(), self.to_text().as_bytes())?;
        Ok(())
    }

    /// Maps unsegmentable words to `[UNK]` instead of failing.
    pub fn with_unknown(mut self, enabled: bool) -> Result<Self, TokenizerError> {
        self.unknown = if enabled {
            Some(
                self.index
                    .get(UNK)
                    .copied()
                    .ok_or(TokenizerError::MissingUnknown)?,
            )
        } else {
            None
        };
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn unknown(&self) -> Option<TokenId> {
        self.unknown
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>, TokenizerError> {
    let mut ids = Vec::new();
    for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
        match segment_word(word, vocab) {
            Ok(pieces) => ids.extend(pieces),
            Err(err) => match vocab.unknown {
                Some(unk) => ids.push(unk),
                None => return Err(err),
            },
        }
    }
    Ok(ids)
}

fn segment_word(word: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>, TokenizerError> {
    // byte offsets of char boundaries, so slicing never splits a code point
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::with_capacity(word.len() + CONTINUATION.len());
    while start + 1 < bounds.len() {
        let mut matched = None;
        for end in (start + 1..bounds.len()).rev() {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&candidate) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                pieces.push(id);
                start = end;
            }
            None => {
                let ch = word[bounds[start]..].chars().next().unwrap_or_default();
                return Err(TokenizerError::UnknownCharacter {
                    word: word.to_string(),
                    ch,
                });
            }
        }
    }
    Ok(pieces)
}

/// Inverse of [`tokenize`] for in-vocabulary text. Special tokens are skipped.
pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let special = vocab.special();
    let mut out = String::new();
    for &id in ids {
        if special.contains(id) {
            continue;
        }
        let piece = vocab.token(id).ok_or(TokenizerError::BadId(id))?;
        match piece.strip_prefix(CONTINUATION) {
            Some(rest) if !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
    }
    Ok(out)
}

/// A tag and its tokenization. The token order inside a block is fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagBlock {
    tag_text: String,
    token_ids: Vec<TokenId>,
}

impl TagBlock {
    pub fn new(tag: &str, vocab: &Vocabulary) -> Result<Self, TokenizerError> {
        let token_ids = tokenize(tag, vocab)?;
        if token_ids.is_empty() {
            return Err(TokenizerError::EmptyTag);
        }
        Ok(Self {
            tag_text: normalize(tag),
            token_ids,
        })
    }

    pub fn tag_text(&self) -> &str {
        &self.tag_text
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn build_tag_blocks<S: AsRef<str>>(
    tags: &[S],
    vocab: &Vocabulary,
) -> Result<Vec<TagBlock>, TokenizerError> {
    tags.iter()
        .map(|t| TagBlock::new(t.as_ref(), vocab))
        .collect()
}
