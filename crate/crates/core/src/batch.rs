//! Fused text + region inputs.
//!
//! Pre-training layout: `tag tokens.. [SEP] regions..`, all positions attend
//! to each other.
//!
//! Fine-tuning / inference layout:
//! `[CLS] caption.. [SEP] tag tokens.. [SEP] regions..`. Caption positions
//! attend causally inside the caption span and fully to the tag and region
//! positions. Tag and region positions never attend to the caption, so their
//! representations do not change while a caption is being decoded.
//!
//! Position ids count from zero inside the caption span and again inside the
//! tag span, which makes the tag span of a fine-tuning batch encode exactly
//! like the text of a pre-training batch. Regions carry no position id.

use std::ops::Range;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tokenizer::{SpecialTokens, TagBlock, TokenId, Vocabulary};

pub const SEGMENT_CAPTION: usize = 0;
pub const SEGMENT_TAG: usize = 1;
pub const SEGMENT_REGION: usize = 2;
pub const GEOMETRY_DIM: usize = 6;

const BOX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum BatchError {
    #[error("at least one tag is required")]
    EmptyTags,
    #[error("caption is empty")]
    EmptyCaption,
    #[error("{what} has length {len}, maximum is {max}")]
    OverLength {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("inference prefix must start with [CLS] and end with [MASK]")]
    MalformedPrefix,
    #[error("region appearance has {got} values, expected {expected}")]
    RegionDim { expected: usize, got: usize },
    #[error("invalid region box: {0}")]
    BadBox(String),
    #[error("invalid batch configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub d_app: usize,
    pub max_regions: usize,
    pub max_tag_tokens: usize,
    pub max_caption: usize,
    pub max_tags: usize,
    pub mask_rate: f64,
    /// Probabilities of replacing a chosen token by `[MASK]`, by a random
    /// token, or keeping it.
    pub mask_action_probs: [f64; 3],
    /// Whether the `[SEP]` closing a caption may be chosen for prediction.
    /// Without it a fine-tuned model never learns to stop.
    pub mask_caption_end: bool,
    /// Pad the text segment with `[PAD]` up to this many positions.
    pub pad_text_to: Option<usize>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            d_app: 16,
            max_regions: 50,
            max_tag_tokens: 15,
            max_caption: 40,
            max_tags: 30,
            mask_rate: 0.15,
            mask_action_probs: [0.8, 0.1, 0.1],
            mask_caption_end: true,
            pad_text_to: None,
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<(), BatchError> {
        let bad = |m: &str| Err(BatchError::BadConfig(m.to_string()));
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return bad("mask_rate must lie in (0, 1]");
        }
        let sum: f64 = self.mask_action_probs.iter().sum();
        if self.mask_action_probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return bad("mask_action_probs must be non-negative and sum to 1");
        }
        if self.d_app == 0 {
            return bad("d_app must be positive");
        }
        Ok(())
    }

    /// Longest text span (caption span or tag span) a batch can contain.
    pub fn max_text_span(&self) -> usize {
        let caption = self.max_caption + 2;
        let tags = self.max_tags.max(self.max_tag_tokens) + 1;
        caption.max(tags).max(self.pad_text_to.unwrap_or(0))
    }
}

/// One image region: appearance features followed by normalized geometry
/// `(x1, y1, x2, y2, w, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    appearance: Vec<f64>,
    geometry: [f64; GEOMETRY_DIM],
}

impl Region {
    pub fn new(appearance: Vec<f64>, geometry: [f64; GEOMETRY_DIM]) -> Result<Self, BatchError> {
        let [x1, y1, x2, y2, w, h] = geometry;
        let inside = |v: f64| (-BOX_TOLERANCE..=1.0 + BOX_TOLERANCE).contains(&v);
        if !geometry.iter().all(|v| v.is_finite()) || !appearance.iter().all(|v| v.is_finite()) {
            return Err(BatchError::BadBox("non-finite value".into()));
        }
        if !(inside(x1) && inside(x2) && inside(y1) && inside(y2))
            || x1 > x2 + BOX_TOLERANCE
            || y1 > y2 + BOX_TOLERANCE
        {
            return Err(BatchError::BadBox(format!("{geometry:?}")));
        }
        if (w - (x2 - x1)).abs() > BOX_TOLERANCE || (h - (y2 - y1)).abs() > BOX_TOLERANCE {
            return Err(BatchError::BadBox(format!("size mismatch in {geometry:?}")));
        }
        Ok(Self {
            appearance,
            geometry,
        })
    }

    /// Normalizes a pixel box `(x1, y1, x2, y2)` by the image size.
    pub fn from_pixel_box(
        appearance: Vec<f64>,
        pixel_box: [f64; 4],
        image_size: (f64, f64),
    ) -> Result<Self, BatchError> {
        let (width, height) = image_size;
        if !(width > 0.0 && height > 0.0) {
            return Err(BatchError::BadBox(format!("image size {width}x{height}")));
        }
        let [x1, y1, x2, y2] = pixel_box;
        let (nx1, ny1, nx2, ny2) = (x1 / width, y1 / height, x2 / width, y2 / height);
        Self::new(appearance, [nx1, ny1, nx2, ny2, nx2 - nx1, ny2 - ny1])
    }

    pub fn appearance(&self) -> &[f64] {
        &self.appearance
    }

    pub fn geometry(&self) -> &[f64; GEOMETRY_DIM] {
        &self.geometry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Pretrain,
    Finetune,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSlot {
    /// Index into the text segment.
    pub position: usize,
    pub action: MaskAction,
    pub target_id: TokenId,
    /// Owning tag block in pre-training, `None` for caption tokens.
    pub block: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub mode: Mode,
    /// Text tokens after mask replacement.
    pub token_ids: Vec<TokenId>,
    /// One entry per text position followed by one per region.
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// `K x (d_app + 6)`.
    pub regions: Array2<f64>,
    /// `true` where row position may attend to column position.
    pub attn_mask: Array2<bool>,
    /// Sorted by position.
    pub mask_slots: Vec<MaskSlot>,
    /// Token count of every tag block, indexed by block id.
    pub block_lens: Vec<usize>,
    /// Text positions occupied by each tag block.
    pub tag_spans: Vec<Range<usize>>,
    /// Positions `0..caption_span` form the caption span (zero in pre-training).
    pub caption_span: usize,
    /// Number of trailing `[PAD]` text positions.
    pub padding: usize,
}

impl EncodedBatch {
    pub fn text_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn num_regions(&self) -> usize {
        self.regions.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.text_len() + self.num_regions()
    }

    /// Sequence index of region `k`.
    pub fn region_position(&self, k: usize) -> usize {
        self.text_len() + k
    }

    /// The text tokens with every mask slot restored to its target.
    pub fn original_ids(&self) -> Vec<TokenId> {
        let mut ids = self.token_ids.clone();
        for slot in &self.mask_slots {
            ids[slot.position] = slot.target_id;
        }
        ids
    }
}

/// Builds [`EncodedBatch`]es for one vocabulary and configuration.
#[derive(Debug, Clone)]
pub struct BatchBuilder {
    config: BatchConfig,
    special: SpecialTokens,
    /// Ids a RANDOM replacement may draw from (all non-special tokens).
    replacement_pool: Vec<TokenId>,
}

enum Budget {
    Rate,
    SingleToken,
}

impl BatchBuilder {
    pub fn new(config: BatchConfig, vocab: &Vocabulary) -> Result<Self, BatchError> {
        config.validate()?;
        let special = vocab.special();
        let replacement_pool: Vec<TokenId> = (0..vocab.len() as TokenId)
            .filter(|id| !special.contains(*id))
            .collect();
        if replacement_pool.is_empty() {
            return Err(BatchError::BadConfig(
                "vocabulary has no ordinary tokens".into(),
            ));
        }
        Ok(Self {
            config,
            special,
            replacement_pool,
        })
    }

    pub fn config(&self) -> &BatchConfig {
        &self.config
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    fn budget(&self, count: usize) -> usize {
        // the epsilon keeps e.g. 0.15 * 20 from rounding up to 4
        let raw = (self.config.mask_rate * count as f64 - 1e-9).ceil();
        (raw.max(1.0) as usize).min(count.max(1))
    }

    fn check_regions(&self, regions: &[Region]) -> Result<Array2<f64>, BatchError> {
        if regions.len() > self.config.max_regions {
            return Err(BatchError::OverLength {
                what: "regions",
                len: regions.len(),
                max: self.config.max_regions,
            });
        }
        let width = self.config.d_app + GEOMETRY_DIM;
        let mut out = Array2::zeros((regions.len(), width));
        for (k, region) in regions.iter().enumerate() {
            if region.appearance.len() != self.config.d_app {
                return Err(BatchError::RegionDim {
                    expected: self.config.d_app,
                    got: region.appearance.len(),
                });
            }
            let mut row = out.row_mut(k);
            for (dst, src) in row
                .iter_mut()
                .zip(region.appearance.iter().chain(region.geometry.iter()))
            {
                *dst = *src;
            }
        }
        Ok(out)
    }

    fn draw_action(&self, rng: &mut rng::Rng) -> (MaskAction, Option<TokenId>) {
        let [p_mask, p_random, _] = self.config.mask_action_probs;
        let u: f64 = rng.gen();
        if u < p_mask {
            (MaskAction::Mask, None)
        } else if u < p_mask + p_random {
            let id = *self
                .replacement_pool
                .choose(rng)
                .expect("replacement pool is non-empty");
            (MaskAction::Random, Some(id))
        } else {
            (MaskAction::Keep, None)
        }
    }

    /// Applies an action to each chosen position, in position order.
    fn apply_masking(
        &self,
        token_ids: &mut [TokenId],
        chosen: &mut [(usize, Option<usize>)],
        rng: &mut rng::Rng,
    ) -> Vec<MaskSlot> {
        chosen.sort_unstable();
        chosen
            .iter()
            .map(|&(position, block)| {
                let target_id = token_ids[position];
                let (action, replacement) = self.draw_action(rng);
                token_ids[position] = match action {
                    MaskAction::Mask => self.special.mask,
                    MaskAction::Random => replacement.unwrap_or(target_id),
                    MaskAction::Keep => target_id,
                };
                MaskSlot {
                    position,
                    action,
                    target_id,
                    block,
                }
            })
            .collect()
    }

    fn pad_to(&self, token_ids: &mut Vec<TokenId>) -> usize {
        match self.config.pad_text_to {
            Some(n) if n > token_ids.len() => {
                let padding = n - token_ids.len();
                token_ids.resize(n, self.special.pad);
                padding
            }
            _ => 0,
        }
    }

    /// Lays out `tags [SEP]` starting at text position `offset`.
    fn tag_span(
        &self,
        blocks: &[TagBlock],
        offset: usize,
        token_ids: &mut Vec<TokenId>,
        position_ids: &mut Vec<usize>,
        segment_ids: &mut Vec<usize>,
    ) -> Vec<Range<usize>> {
        let mut spans = Vec::with_capacity(blocks.len());
        let mut local = 0;
        for block in blocks {
            let start = offset + local;
            for &id in block.token_ids() {
                token_ids.push(id);
                position_ids.push(local);
                segment_ids.push(SEGMENT_TAG);
                local += 1;
            }
            spans.push(start..offset + local);
        }
        token_ids.push(self.special.sep);
        position_ids.push(local);
        segment_ids.push(SEGMENT_TAG);
        spans
    }

    fn tag_token_count(&self, blocks: &[TagBlock], max: usize) -> Result<usize, BatchError> {
        let total: usize = blocks.iter().map(TagBlock::len).sum();
        if total > max {
            return Err(BatchError::OverLength {
                what: "tag tokens",
                len: total,
                max,
            });
        }
        Ok(total)
    }

    fn pretrain_layout(
        &self,
        blocks: &[TagBlock],
        regions: &[Region],
    ) -> Result<(EncodedBatch, usize), BatchError> {
        if blocks.is_empty() {
            return Err(BatchError::EmptyTags);
        }
        let total = self.tag_token_count(blocks, self.config.max_tag_tokens)?;
        let region_matrix = self.check_regions(regions)?;
        let mut token_ids = Vec::with_capacity(total + 1);
        let mut position_ids = Vec::with_capacity(total + 1);
        let mut segment_ids = Vec::with_capacity(total + 1 + regions.len());
        let tag_spans = self.tag_span(
            blocks,
            0,
            &mut token_ids,
            &mut position_ids,
            &mut segment_ids,
        );
        let padding = self.pad_to(&mut token_ids);
        for _ in 0..padding {
            position_ids.push(position_ids.len());
            segment_ids.push(SEGMENT_CAPTION);
        }
        segment_ids.extend(std::iter::repeat_n(SEGMENT_REGION, regions.len()));
        let n = token_ids.len() + regions.len();
        let text = token_ids.len();
        let mut attn_mask = Array2::from_elem((n, n), true);
        mask_padding(&mut attn_mask, text - padding..text);
        let batch = EncodedBatch {
            mode: Mode::Pretrain,
            token_ids,
            segment_ids,
            position_ids,
            regions: region_matrix,
            attn_mask,
            mask_slots: Vec::new(),
            block_lens: blocks.iter().map(TagBlock::len).collect(),
            tag_spans,
            caption_span: 0,
            padding,
        };
        Ok((batch, total))
    }

    /// Pre-training batch: whole tags are masked, sampled uniformly without
    /// replacement, until the token budget `ceil(mask_rate * tag tokens)`
    /// (at least one tag) is met. Each masked token draws its replacement
    /// action independently.
    pub fn build_pretrain_batch(
        &self,
        blocks: &[TagBlock],
        regions: &[Region],
        seed: u64,
    ) -> Result<EncodedBatch, BatchError> {
        self.pretrain_with(blocks, regions, seed, Budget::Rate)
    }

    /// Pre-training batch with exactly one tag token masked.
    pub fn build_single_mask_batch(
        &self,
        blocks: &[TagBlock],
        regions: &[Region],
        seed: u64,
    ) -> Result<EncodedBatch, BatchError> {
        self.pretrain_with(blocks, regions, seed, Budget::SingleToken)
    }

    /// Pre-training layout with nothing masked.
    pub fn build_context_batch(
        &self,
        blocks: &[TagBlock],
        regions: &[Region],
    ) -> Result<EncodedBatch, BatchError> {
        Ok(self.pretrain_layout(blocks, regions)?.0)
    }

    fn pretrain_with(
        &self,
        blocks: &[TagBlock],
        regions: &[Region],
        seed: u64,
        budget: Budget,
    ) -> Result<EncodedBatch, BatchError> {
        let (mut batch, total) = self.pretrain_layout(blocks, regions)?;
        let mut rng = rng::seeded(seed);
        let mut chosen: Vec<(usize, Option<usize>)> = Vec::new();
        match budget {
            Budget::Rate => {
                let budget = self.budget(total);
                let mut order: Vec<usize> = (0..blocks.len()).collect();
                order.shuffle(&mut rng);
                for b in order {
                    if chosen.len() >= budget {
                        break;
                    }
                    chosen.extend(batch.tag_spans[b].clone().map(|p| (p, Some(b))));
                }
            }
            Budget::SingleToken => {
                let position = rng.gen_range(0..total);
                let block = batch
                    .tag_spans
                    .iter()
                    .position(|s| s.contains(&position))
                    .expect("tag spans cover all tag tokens");
                chosen.push((position, Some(block)));
            }
        }
        batch.mask_slots = self.apply_masking(&mut batch.token_ids, &mut chosen, &mut rng);
        Ok(batch)
    }

    fn caption_layout(
        &self,
        mode: Mode,
        caption_span: &[TokenId],
        blocks: &[TagBlock],
        regions: &[Region],
    ) -> Result<EncodedBatch, BatchError> {
        // caption_span includes [CLS] and the closing token
        let caption_len = caption_span.len() - 2;
        if caption_len > self.config.max_caption {
            return Err(BatchError::OverLength {
                what: "caption",
                len: caption_len,
                max: self.config.max_caption,
            });
        }
        self.tag_token_count(blocks, self.config.max_tags)?;
        let region_matrix = self.check_regions(regions)?;
        let mut token_ids = caption_span.to_vec();
        let mut position_ids: Vec<usize> = (0..caption_span.len()).collect();
        let mut segment_ids = vec![SEGMENT_CAPTION; caption_span.len()];
        let tag_spans = self.tag_span(
            blocks,
            caption_span.len(),
            &mut token_ids,
            &mut position_ids,
            &mut segment_ids,
        );
        let unpadded = token_ids.len();
        let padding = self.pad_to(&mut token_ids);
        for i in 0..padding {
            position_ids.push(caption_span.len() + i);
            segment_ids.push(SEGMENT_CAPTION);
        }
        segment_ids.extend(std::iter::repeat_n(SEGMENT_REGION, regions.len()));
        let text = token_ids.len();
        let n = text + regions.len();
        let cap = caption_span.len();
        let mut attn_mask = Array2::from_elem((n, n), false);
        for i in 0..n {
            let in_caption = i < cap;
            for j in 0..n {
                let j_caption = j < cap;
                attn_mask[[i, j]] = match (in_caption, j_caption) {
                    (true, true) => j <= i,
                    (true, false) => true,
                    (false, true) => false,
                    (false, false) => true,
                };
            }
        }
        mask_padding(&mut attn_mask, unpadded..text);
        Ok(EncodedBatch {
            mode,
            token_ids,
            segment_ids,
            position_ids,
            regions: region_matrix,
            attn_mask,
            mask_slots: Vec::new(),
            block_lens: blocks.iter().map(TagBlock::len).collect(),
            tag_spans,
            caption_span: cap,
            padding,
        })
    }

    /// Fine-tuning batch: `ceil(mask_rate * caption tokens)` caption
    /// positions (at least one) are chosen uniformly. The closing `[SEP]` is
    /// eligible when `mask_caption_end` is set.
    pub fn build_finetune_batch(
        &self,
        caption_ids: &[TokenId],
        blocks: &[TagBlock],
        regions: &[Region],
        seed: u64,
    ) -> Result<EncodedBatch, BatchError> {
        if caption_ids.is_empty() {
            return Err(BatchError::EmptyCaption);
        }
        let mut span = Vec::with_capacity(caption_ids.len() + 2);
        span.push(self.special.cls);
        span.extend_from_slice(caption_ids);
        span.push(self.special.sep);
        let mut batch = self.caption_layout(Mode::Finetune, &span, blocks, regions)?;
        let mut rng = rng::seeded(seed);
        let last = if self.config.mask_caption_end {
            caption_ids.len() + 1
        } else {
            caption_ids.len()
        };
        let mut candidates: Vec<usize> = (1..=last).collect();
        candidates.shuffle(&mut rng);
        let mut chosen: Vec<(usize, Option<usize>)> = candidates
            .into_iter()
            .take(self.budget(caption_ids.len()))
            .map(|p| (p, None))
            .collect();
        batch.mask_slots = self.apply_masking(&mut batch.token_ids, &mut chosen, &mut rng);
        Ok(batch)
    }

    /// Inference batch for a prefix `[CLS] w1 .. wn [MASK]`; the only mask
    /// slot is the trailing `[MASK]`.
    pub fn build_infer_batch(
        &self,
        prefix_ids: &[TokenId],
        blocks: &[TagBlock],
        regions: &[Region],
    ) -> Result<EncodedBatch, BatchError> {
        let well_formed = prefix_ids.len() >= 2
            && prefix_ids[0] == self.special.cls
            && prefix_ids[prefix_ids.len() - 1] == self.special.mask;
        if !well_formed {
            return Err(BatchError::MalformedPrefix);
        }
        let mut span = prefix_ids.to_vec();
        span.push(self.special.sep);
        let mut batch = self.caption_layout(Mode::Infer, &span, blocks, regions)?;
        batch.mask_slots = vec![MaskSlot {
            position: prefix_ids.len() - 1,
            action: MaskAction::Mask,
            target_id: self.special.mask,
            block: None,
        }];
        Ok(batch)
    }
}

fn mask_padding(mask: &mut Array2<bool>, pads: Range<usize>) {
    for p in pads {
        mask.row_mut(p).fill(false);
        mask.column_mut(p).fill(false);
    }
}
