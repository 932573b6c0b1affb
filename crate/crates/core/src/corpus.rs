//! Line-delimited JSON corpora of images with tags, regions and captions.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{BatchError, Region};
use crate::tokenizer::{self, TagBlock, TokenId, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("corpus is empty")]
    Empty,
}

impl CorpusError {
    fn record(index: usize, message: impl ToString) -> Self {
        Self::Record {
            index,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub appearance: Vec<f64>,
    /// Pixel box `[x1, y1, x2, y2]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Object class, when known. Only analysis tools read it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// An image with its tags and region features. Any caption present on the
/// line is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTagRecord {
    pub id: String,
    pub tags: Vec<String>,
    pub regions: Vec<RegionRecord>,
    /// `[width, height]` in pixels.
    pub image_size: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageCaptionRecord {
    pub id: String,
    pub caption: String,
    pub tags: Vec<String>,
    pub regions: Vec<RegionRecord>,
    pub image_size: [f64; 2],
}

impl ImageCaptionRecord {
    pub fn tag_record(&self) -> ImageTagRecord {
        ImageTagRecord {
            id: self.id.clone(),
            tags: self.tags.clone(),
            regions: self.regions.clone(),
            image_size: self.image_size,
        }
    }
}

/// Parses one record per non-blank line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, CorpusError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| serde_json::from_str(line).map_err(|e| CorpusError::record(i, e)))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&text)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    crate::io::write_atomic(path, to_jsonl(records).as_bytes()).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A record converted to model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub blocks: Vec<TagBlock>,
    pub regions: Vec<Region>,
    /// Caption token ids without `[CLS]`/`[SEP]`.
    pub caption: Option<Vec<TokenId>>,
    /// Object class per region, when the record names one.
    pub region_labels: Vec<Option<String>>,
}

fn convert_regions(record: &ImageTagRecord, d_app: usize) -> Result<Vec<Region>, String> {
    let [w, h] = record.image_size;
    record
        .regions
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if r.appearance.len() != d_app {
                return Err(format!(
                    "region {k} has {} appearance values, expected {d_app}",
                    r.appearance.len()
                ));
            }
            let [x1, y1, x2, y2] = r.bbox;
            if !(0.0 <= x1 && x1 <= x2 && x2 <= w && 0.0 <= y1 && y1 <= y2 && y2 <= h) {
                return Err(format!("region {k} box {:?} outside {w}x{h} image", r.bbox));
            }
            Region::from_pixel_box(r.appearance.clone(), r.bbox, (w, h))
                .map_err(|e: BatchError| format!("region {k}: {e}"))
        })
        .collect()
}

fn convert_tags(record: &ImageTagRecord, vocab: &Vocabulary) -> Result<Vec<TagBlock>, String> {
    if record.tags.is_empty() {
        return Err("record has no tags".into());
    }
    tokenizer::build_tag_blocks(&record.tags, vocab).map_err(|e: TokenizerError| e.to_string())
}

/// Validates and converts image-tag records. Errors name the record index.
pub fn prepare_tag_records(
    records: &[ImageTagRecord],
    vocab: &Vocabulary,
    d_app: usize,
) -> Result<Vec<Example>, CorpusError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Example {
                id: r.id.clone(),
                blocks: convert_tags(r, vocab).map_err(|m| CorpusError::record(i, m))?,
                regions: convert_regions(r, d_app).map_err(|m| CorpusError::record(i, m))?,
                caption: None,
                region_labels: r.regions.iter().map(|g| g.label.clone()).collect(),
            })
        })
        .collect()
}

/// Like [`prepare_tag_records`], additionally tokenizing non-empty captions.
pub fn prepare_caption_records(
    records: &[ImageCaptionRecord],
    vocab: &Vocabulary,
    d_app: usize,
) -> Result<Vec<Example>, CorpusError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let base = r.tag_record();
            let caption =
                tokenizer::tokenize(&r.caption, vocab).map_err(|e| CorpusError::record(i, e))?;
            if caption.is_empty() {
                return Err(CorpusError::record(i, "caption is empty"));
            }
            Ok(Example {
                id: r.id.clone(),
                blocks: convert_tags(&base, vocab).map_err(|m| CorpusError::record(i, m))?,
                regions: convert_regions(&base, d_app).map_err(|m| CorpusError::record(i, m))?,
                caption: Some(caption),
                region_labels: r.regions.iter().map(|g| g.label.clone()).collect(),
            })
        })
        .collect()
}

/// Whole-word vocabulary: the special tokens followed by every distinct
/// normalized word of the given texts, sorted.
pub fn word_vocabulary<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
    let words: BTreeSet<String> = texts
        .into_iter()
        .flat_map(|t| {
            tokenizer::normalize(t)
                .split(' ')
                .filter(|w| !w.is_empty())
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .collect();
    let specials = [
        tokenizer::PAD,
        tokenizer::CLS,
        tokenizer::SEP,
        tokenizer::MASK,
        tokenizer::UNK,
    ];
    let tokens = specials.iter().map(|s| s.to_string()).chain(
        words
            .into_iter()
            .filter(|w| !specials.contains(&w.as_str())),
    );
    Vocabulary::from_tokens(tokens).expect("distinct words form a valid vocabulary")
}
