//! Analysis tools: region-tag alignment, embedding export and object
//! mention scores for generated captions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{BatchBuilder, BatchError, EncodedBatch, Region};
use crate::corpus::Example;
use crate::encoder::{self, EncoderError, ForwardResult, Parameters};
use crate::tokenizer::{self, TagBlock};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("example {index}: {source}")]
    Batch { index: usize, source: BatchError },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// How a multi-token tag is reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub region_index: usize,
    pub tag: String,
    pub cosine: f64,
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Last-layer vectors for every tag and region of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbeddings {
    pub tags: Vec<Array1<f64>>,
    pub regions: Vec<Array1<f64>>,
}

fn pooled(fwd: &ForwardResult, batch: &EncodedBatch, pooling: Pooling) -> ContextEmbeddings {
    let tags = batch
        .tag_spans
        .iter()
        .map(|span| match pooling {
            Pooling::First => fwd.last_layer.row(span.start).to_owned(),
            Pooling::Mean => {
                let rows = fwd.last_layer.slice(ndarray::s![span.clone(), ..]);
                rows.sum_axis(ndarray::Axis(0)) / span.len() as f64
            }
        })
        .collect();
    let regions = (0..batch.num_regions())
        .map(|k| fwd.last_layer.row(batch.region_position(k)).to_owned())
        .collect();
    ContextEmbeddings { tags, regions }
}

/// Encodes all tags and regions of one image together, without masking.
pub fn embed(
    params: &Parameters,
    builder: &BatchBuilder,
    blocks: &[TagBlock],
    regions: &[Region],
    pooling: Pooling,
) -> Result<ContextEmbeddings, ProbeError> {
    let batch = builder
        .build_context_batch(blocks, regions)
        .map_err(|source| ProbeError::Batch { index: 0, source })?;
    let fwd = encoder::forward(params, &batch)?;
    Ok(pooled(&fwd, &batch, pooling))
}

/// Cosine similarity of every (region, tag) pair, regions outermost.
pub fn align(
    params: &Parameters,
    builder: &BatchBuilder,
    blocks: &[TagBlock],
    regions: &[Region],
    pooling: Pooling,
) -> Result<Vec<AlignmentScore>, ProbeError> {
    let e = embed(params, builder, blocks, regions, pooling)?;
    let mut out = Vec::with_capacity(e.regions.len() * e.tags.len());
    for (k, r) in e.regions.iter().enumerate() {
        for (block, t) in blocks.iter().zip(&e.tags) {
            out.push(AlignmentScore {
                region_index: k,
                tag: block.tag_text().to_string(),
                cosine: cosine(r.view(), t.view()),
            });
        }
    }
    Ok(out)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn ranking_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    if positives.is_empty() || negatives.is_empty() {
        return 0.5;
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positives {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    wins / (positives.len() * neg.len()) as f64
}

/// Cosines of matching and mismatching (region, tag) pairs within each
/// image. A region matches a tag when its label equals the tag text.
/// Unlabelled regions are skipped.
pub fn labelled_pair_scores(
    params: &Parameters,
    builder: &BatchBuilder,
    examples: &[Example],
    pooling: Pooling,
) -> Result<(Vec<f64>, Vec<f64>), ProbeError> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (index, ex) in examples.iter().enumerate() {
        let scores =
            align(params, builder, &ex.blocks, &ex.regions, pooling).map_err(|e| match e {
                ProbeError::Batch { source, .. } => ProbeError::Batch { index, source },
                other => other,
            })?;
        for s in scores {
            let Some(Some(label)) = ex.region_labels.get(s.region_index) else {
                continue;
            };
            if tokenizer::normalize(label) == s.tag {
                pos.push(s.cosine);
            } else {
                neg.push(s.cosine);
            }
        }
    }
    Ok((pos, neg))
}

/// Tab-separated export: a header line, then one line per region and per
/// tag with id, modality (`REGION` or `TAG`), label and the last-layer
/// vector in fixed decimal.
pub fn embeddings_tsv(
    params: &Parameters,
    builder: &BatchBuilder,
    examples: &[Example],
    pooling: Pooling,
) -> Result<String, ProbeError> {
    let hidden = params.config().hidden;
    let mut out = String::from("id\tmodality\tlabel");
    for d in 0..hidden {
        write!(out, "\th{d}").expect("write to string");
    }
    out.push('\n');
    let mut line = |id: String, modality: &str, label: &str, v: &Array1<f64>| {
        write!(out, "{id}\t{modality}\t{label}").expect("write to string");
        for x in v {
            write!(out, "\t{x:.9}").expect("write to string");
        }
        out.push('\n');
    };
    for (index, ex) in examples.iter().enumerate() {
        let e = embed(params, builder, &ex.blocks, &ex.regions, pooling).map_err(|e| match e {
            ProbeError::Batch { source, .. } => ProbeError::Batch { index, source },
            other => other,
        })?;
        for (k, v) in e.regions.iter().enumerate() {
            let label = ex
                .region_labels
                .get(k)
                .cloned()
                .flatten()
                .unwrap_or_default();
            line(format!("{}/r{k}", ex.id), "REGION", &label, v);
        }
        for (j, (block, v)) in ex.blocks.iter().zip(&e.tags).enumerate() {
            line(format!("{}/t{j}", ex.id), "TAG", block.tag_text(), v);
        }
    }
    Ok(out)
}

pub fn export_embeddings(
    params: &Parameters,
    builder: &BatchBuilder,
    examples: &[Example],
    pooling: Pooling,
    path: &Path,
) -> Result<(), ProbeError> {
    let text = embeddings_tsv(params, builder, examples, pooling)?;
    crate::io::write_atomic(path, text.as_bytes()).map_err(|source| ProbeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A class name and alternative names that also count as a mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

impl ObjectClass {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            synonyms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: BTreeMap<String, ClassCounts>,
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn mentions(caption_words: &[String], phrase: &str) -> bool {
    let p = words(phrase);
    !p.is_empty() && caption_words.windows(p.len()).any(|w| w == p.as_slice())
}

/// Micro-averaged precision, recall and F1 of class mentions in generated
/// captions against each image's ground-truth tags. A class is mentioned
/// when its name or a synonym occurs as whole words; a tag names a class
/// when it equals the name or a synonym.
pub fn mention_f1(
    generated: &[String],
    ground_truth: &[Vec<String>],
    classes: &[ObjectClass],
) -> MentionF1 {
    let mut per_class: BTreeMap<String, ClassCounts> = classes
        .iter()
        .map(|c| (c.name.clone(), ClassCounts::default()))
        .collect();
    for (caption, tags) in generated.iter().zip(ground_truth) {
        let caption_words = words(caption);
        let tag_words: BTreeSet<Vec<String>> = tags.iter().map(|t| words(t)).collect();
        for class in classes {
            let names = std::iter::once(&class.name).chain(&class.synonyms);
            let mut said = false;
            let mut present = false;
            for n in names {
                said |= mentions(&caption_words, n);
                present |= tag_words.contains(&words(n));
            }
            let counts = per_class.get_mut(&class.name).expect("class registered");
            match (said, present) {
                (true, true) => counts.true_positives += 1,
                (true, false) => counts.false_positives += 1,
                (false, true) => counts.false_negatives += 1,
                (false, false) => {}
            }
        }
    }
    let (tp, fp, fn_) = per_class.values().fold((0, 0, 0), |(a, b, c), k| {
        (
            a + k.true_positives,
            b + k.false_positives,
            c + k.false_negatives,
        )
    });
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MentionF1 {
        precision,
        recall,
        f1,
        per_class,
    }
}
