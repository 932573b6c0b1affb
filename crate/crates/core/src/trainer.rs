//! Pre-training and fine-tuning loops.
//!
//! Every random choice is derived from the run seed and the global index of
//! the item being processed, so a run is a pure function of (examples,
//! configuration, seed) and resuming from a checkpoint continues the exact
//! trajectory of an uninterrupted run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{BatchBuilder, BatchError, EncodedBatch};
use crate::corpus::Example;
use crate::encoder::{self, EncoderError, Parameters, Tensor, TensorFile};
use crate::matching::{self, MatchingError};
use crate::rng;
use crate::tokenizer::{TagBlock, TokenId};

const STREAM_EPOCH: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_TAGS: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_EVAL: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("no training examples")]
    EmptyCorpus,
    #[error("record {index}: {message}")]
    Data { index: usize, message: String },
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossMode {
    /// Masked tags scored as a set via block-constrained matching.
    Hungarian,
    /// Every masked token scored against its own original token.
    Ordered,
    /// One masked token per example.
    SingleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer steps of the run, including steps restored from a
    /// checkpoint.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient norm limit; `None` disables clipping. Written as 0 in
    /// config files.
    #[serde(with = "zero_is_none")]
    pub clip_norm: Option<f64>,
    /// Linear learning-rate warmup length; 0 disables warmup.
    pub warmup_steps: usize,
    pub seed: u64,
    /// Pre-training objective. Fine-tuning always uses [`LossMode::Ordered`].
    pub loss_mode: LossMode,
    /// Present each example's tags in a freshly shuffled order.
    pub shuffle_tags: bool,
    /// Steps between evaluations; 0 evaluates once per epoch.
    pub eval_every: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            warmup_steps: 0,
            seed: 0,
            loss_mode: LossMode::Hungarian,
            shuffle_tags: true,
            eval_every: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(value.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("epsilon must be positive and weight_decay non-negative");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Parameters, optimizer moments and the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub first_moment: Parameters,
    pub second_moment: Parameters,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: Parameters) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            params,
            step: 0,
        }
    }

    pub fn checkpoint_paths(dir: &Path, step: usize) -> (PathBuf, PathBuf) {
        (
            dir.join(format!("step-{step:06}.ckpt")),
            dir.join(format!("step-{step:06}.optim")),
        )
    }

    /// Writes the parameter checkpoint and the optimizer file; returns the
    /// parameter checkpoint path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, TrainError> {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let (params_path, optim_path) = Self::checkpoint_paths(dir, self.step);
        encoder::save(&self.params, &params_path)?;
        let mut tensors = Vec::new();
        for (prefix, moments) in [("m", &self.first_moment), ("v", &self.second_moment)] {
            tensors.extend(moments.tensors().iter().map(|t| Tensor {
                name: format!("{prefix}.{}", t.name),
                ..t.clone()
            }));
        }
        let file = TensorFile {
            meta: vec![
                ("kind".into(), "optimizer".into()),
                ("step".into(), self.step.to_string()),
            ],
            tensors,
        };
        encoder::write_tensor_file(&optim_path, &file)?;
        Ok(params_path)
    }

    pub fn load(params_path: &Path, optim_path: &Path) -> Result<Self, TrainError> {
        let params = encoder::load(params_path)?;
        let file = encoder::read_tensor_file(optim_path)?;
        let corrupt = |m: String| TrainError::Encoder(EncoderError::CorruptCheckpoint(m));
        if file.meta("kind") != Some("optimizer") {
            return Err(corrupt("not an optimizer file".into()));
        }
        let step = file
            .meta("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("optimizer file has no step".into()))?;
        let mut moments = Vec::new();
        for prefix in ["m.", "v."] {
            let tensors: Vec<Tensor> = file
                .tensors
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(prefix).map(|name| Tensor {
                        name: name.to_string(),
                        ..t.clone()
                    })
                })
                .collect();
            moments.push(Parameters::from_tensors(params.config(), tensors)?);
        }
        let second_moment = moments.pop().expect("two moments");
        let first_moment = moments.pop().expect("two moments");
        Ok(Self {
            params,
            first_moment,
            second_moment,
            step,
        })
    }

    /// One Adam update with the given (already averaged) gradient.
    pub fn apply(&mut self, grads: &Parameters, config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let lr = config.learning_rate_at(self.step);
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let tensors = self
            .params
            .tensors_mut()
            .iter_mut()
            .zip(self.first_moment.tensors_mut())
            .zip(self.second_moment.tensors_mut())
            .zip(grads.tensors());
        for (((p, m), v), g) in tensors {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
                let update = (m.data[k] / c1) / ((v.data[k] / c2).sqrt() + config.epsilon);
                p.data[k] -= lr * (update + config.weight_decay * p.data[k]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Completed passes over the examples.
    pub epoch: usize,
    pub masked_token_accuracy: f64,
    /// Fraction of examples whose predicted masked tokens equal the targets
    /// as a multiset. Pre-training only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_set_accuracy: Option<f64>,
    /// Teacher-forced next-token accuracy over captions. Fine-tuning only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next_token_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub wall_time_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ReportLine<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// One JSON object per line, steps and evaluations interleaved in step
    /// order. Wall time is left out so reruns produce identical bytes.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        let mut push = |line: ReportLine| {
            out.push_str(&serde_json::to_string(&line).expect("report serializes"));
            out.push('\n');
        };
        for s in &self.steps {
            push(ReportLine::Step(s));
            while let Some(e) = evals.next_if(|e| e.step <= s.step) {
                push(ReportLine::Eval(e));
            }
        }
        for e in evals {
            push(ReportLine::Eval(e));
        }
        out
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Pretrain(LossMode),
    Finetune,
}

struct ItemResult {
    loss: f64,
    slots: usize,
    grads: Parameters,
}

/// Masked tag prediction over image-tag examples.
pub fn pretrain(
    examples: &[Example],
    builder: &BatchBuilder,
    config: &TrainConfig,
    state: TrainState,
) -> Result<TrainOutcome, TrainError> {
    run(
        Task::Pretrain(config.loss_mode),
        examples,
        builder,
        config,
        state,
    )
}

/// Masked caption-token prediction under the causal caption mask.
pub fn finetune(
    examples: &[Example],
    builder: &BatchBuilder,
    config: &TrainConfig,
    state: TrainState,
) -> Result<TrainOutcome, TrainError> {
    if let Some(index) = examples.iter().position(|e| e.caption.is_none()) {
        return Err(TrainError::Data {
            index,
            message: "record has no caption".into(),
        });
    }
    run(Task::Finetune, examples, builder, config, state)
}

fn run(
    task: Task,
    examples: &[Example],
    builder: &BatchBuilder,
    config: &TrainConfig,
    mut state: TrainState,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let started = Instant::now();
    let n = examples.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let eval_every = if config.eval_every == 0 {
        steps_per_epoch
    } else {
        config.eval_every
    };
    let mut report = TrainReport::default();
    let mut order = EpochOrder::new(config.seed, n);
    while state.step < config.steps {
        let step = state.step;
        let items: Vec<(u64, usize)> = (step * config.batch_size..(step + 1) * config.batch_size)
            .map(|g| (g as u64, order.example(g)))
            .collect();
        let params = &state.params;
        let results: Vec<Result<ItemResult, TrainError>> = items
            .par_iter()
            .map(|&(g, i)| item_gradients(task, params, &examples[i], i, builder, config, g))
            .collect();
        let mut grads = params.zeros_like();
        let (mut loss, mut slots) = (0.0, 0usize);
        for r in results {
            let r = r?;
            grads.add_scaled(&r.grads, 1.0);
            loss += r.loss;
            slots += r.slots;
        }
        let loss = loss / slots as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step: step + 1 });
        }
        grads.scale(1.0 / slots as f64);
        if let Some(limit) = config.clip_norm {
            let norm = grads.squared_norm().sqrt();
            if norm > limit {
                grads.scale(limit / norm);
            }
        }
        state.apply(&grads, config);
        if !state.params.is_finite() {
            return Err(TrainError::Diverged { step: state.step });
        }
        report.steps.push(StepRecord {
            step: state.step,
            loss,
        });
        let last = state.step == config.steps;
        if state.step.is_multiple_of(eval_every) || last {
            report.evals.push(evaluate_task(
                task,
                &state.params,
                examples,
                builder,
                config.seed,
                state.step,
                n,
                config.batch_size,
            )?);
        }
        if let Some(dir) = &config.checkpoint_dir {
            if last || (config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every)) {
                let path = state.save(dir)?;
                if last {
                    report.final_checkpoint = Some(path);
                }
            }
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { state, report })
}

/// Example order: a fresh seeded permutation per epoch.
struct EpochOrder {
    seed: u64,
    n: usize,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl EpochOrder {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn example(&mut self, global: usize) -> usize {
        let epoch = global / self.n;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng::seeded(rng::derive(
                self.seed,
                STREAM_EPOCH,
                epoch as u64,
            )));
            self.epoch = Some(epoch);
        }
        self.perm[global % self.n]
    }
}

fn data_error(index: usize) -> impl Fn(BatchError) -> TrainError {
    move |e| TrainError::Data {
        index,
        message: e.to_string(),
    }
}

fn shuffled_blocks(blocks: &[TagBlock], seed: u64) -> Vec<TagBlock> {
    let mut out = blocks.to_vec();
    out.shuffle(&mut rng::seeded(seed));
    out
}

fn pretrain_batch(
    mode: LossMode,
    builder: &BatchBuilder,
    blocks: &[TagBlock],
    example: &Example,
    seed: u64,
) -> Result<EncodedBatch, BatchError> {
    match mode {
        LossMode::SingleMask => builder.build_single_mask_batch(blocks, &example.regions, seed),
        _ => builder.build_pretrain_batch(blocks, &example.regions, seed),
    }
}

fn item_gradients(
    task: Task,
    params: &Parameters,
    example: &Example,
    index: usize,
    builder: &BatchBuilder,
    config: &TrainConfig,
    global: u64,
) -> Result<ItemResult, TrainError> {
    let mask_seed = rng::derive(config.seed, STREAM_MASK, global);
    let blocks = if config.shuffle_tags {
        shuffled_blocks(
            &example.blocks,
            rng::derive(config.seed, STREAM_TAGS, global),
        )
    } else {
        example.blocks.clone()
    };
    let batch = match task {
        Task::Pretrain(mode) => pretrain_batch(mode, builder, &blocks, example, mask_seed),
        Task::Finetune => {
            let caption = example.caption.as_deref().unwrap_or_default();
            builder.build_finetune_batch(caption, &blocks, &example.regions, mask_seed)
        }
    }
    .map_err(data_error(index))?;
    let fwd = encoder::forward_with_dropout(
        params,
        &batch,
        rng::derive(config.seed, STREAM_DROPOUT, global),
    )?;
    let probs: Vec<Array1<f64>> = batch
        .mask_slots
        .iter()
        .map(|s| fwd.probs_at(s.position))
        .collect();
    if probs.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
        // reported as divergence by the caller
        return Ok(ItemResult {
            loss: f64::NAN,
            slots: probs.len(),
            grads: params.zeros_like(),
        });
    }
    let (loss, targets): (f64, Vec<TokenId>) = match task {
        Task::Pretrain(LossMode::Hungarian) => {
            let matched = matching::vivo_loss(&probs, &batch.mask_slots, &batch.block_lens)?;
            (matched.loss, matched.slot_targets)
        }
        _ => (
            matching::mlm_loss(&probs, &batch.mask_slots)?,
            batch.mask_slots.iter().map(|s| s.target_id).collect(),
        ),
    };
    let slot_grads: Vec<(usize, Array1<f64>)> = batch
        .mask_slots
        .iter()
        .zip(probs)
        .zip(&targets)
        .map(|((slot, mut p), &t)| {
            p[t as usize] -= 1.0;
            (slot.position, p)
        })
        .collect();
    let grads = encoder::backward(params, &batch, &fwd, &slot_grads)?;
    Ok(ItemResult {
        loss,
        slots: targets.len(),
        grads,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_task(
    task: Task,
    params: &Parameters,
    examples: &[Example],
    builder: &BatchBuilder,
    seed: u64,
    step: usize,
    n: usize,
    batch_size: usize,
) -> Result<EvalRecord, TrainError> {
    let epoch = step * batch_size / n;
    Ok(match task {
        Task::Pretrain(mode) => {
            let m = evaluate_pretrain(params, examples, builder, mode, seed)?;
            EvalRecord {
                step,
                epoch,
                masked_token_accuracy: m.masked_token_accuracy,
                masked_set_accuracy: Some(m.masked_set_accuracy),
                next_token_accuracy: None,
            }
        }
        Task::Finetune => EvalRecord {
            step,
            epoch,
            masked_token_accuracy: evaluate_finetune_masked(params, examples, builder, seed)?,
            masked_set_accuracy: None,
            next_token_accuracy: Some(next_token_accuracy(params, examples, builder)?),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainMetrics {
    pub masked_token_accuracy: f64,
    pub masked_set_accuracy: f64,
}

/// Masked-tag accuracy on one fixed masking per example (derived from
/// `seed`, independent of the training draws). Tags keep their record order.
pub fn evaluate_pretrain(
    params: &Parameters,
    examples: &[Example],
    builder: &BatchBuilder,
    mode: LossMode,
    seed: u64,
) -> Result<PretrainMetrics, TrainError> {
    let per_example: Vec<Result<(usize, usize, bool), TrainError>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let batch = pretrain_batch(
                mode,
                builder,
                &ex.blocks,
                ex,
                rng::derive(seed, STREAM_EVAL, i as u64),
            )
            .map_err(data_error(i))?;
            let fwd = encoder::forward(params, &batch)?;
            let mut predicted: Vec<TokenId> = Vec::new();
            let mut targets: Vec<TokenId> = Vec::new();
            let mut correct = 0;
            for slot in &batch.mask_slots {
                let p = encoder::argmax(fwd.logits_at(slot.position)) as TokenId;
                correct += usize::from(p == slot.target_id);
                predicted.push(p);
                targets.push(slot.target_id);
            }
            predicted.sort_unstable();
            targets.sort_unstable();
            Ok((correct, targets.len(), predicted == targets))
        })
        .collect();
    let (mut correct, mut total, mut sets) = (0, 0, 0);
    for r in per_example {
        let (c, t, s) = r?;
        correct += c;
        total += t;
        sets += usize::from(s);
    }
    Ok(PretrainMetrics {
        masked_token_accuracy: correct as f64 / total.max(1) as f64,
        masked_set_accuracy: sets as f64 / examples.len().max(1) as f64,
    })
}

fn evaluate_finetune_masked(
    params: &Parameters,
    examples: &[Example],
    builder: &BatchBuilder,
    seed: u64,
) -> Result<f64, TrainError> {
    let per_example: Vec<Result<(usize, usize), TrainError>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let caption = ex.caption.as_deref().unwrap_or_default();
            let batch = builder
                .build_finetune_batch(
                    caption,
                    &ex.blocks,
                    &ex.regions,
                    rng::derive(seed, STREAM_EVAL, i as u64),
                )
                .map_err(data_error(i))?;
            let fwd = encoder::forward(params, &batch)?;
            let correct = batch
                .mask_slots
                .iter()
                .filter(|s| encoder::argmax(fwd.logits_at(s.position)) as TokenId == s.target_id)
                .count();
            Ok((correct, batch.mask_slots.len()))
        })
        .collect();
    let (mut correct, mut total) = (0, 0);
    for r in per_example {
        let (c, t) = r?;
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Fraction of caption tokens, including the closing `[SEP]`, predicted
/// correctly at a trailing `[MASK]` given the true preceding tokens.
pub fn next_token_accuracy(
    params: &Parameters,
    examples: &[Example],
    builder: &BatchBuilder,
) -> Result<f64, TrainError> {
    let special = builder.special();
    let per_example: Vec<Result<(usize, usize), TrainError>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let caption = ex.caption.as_deref().unwrap_or_default();
            let mut correct = 0;
            for k in 0..=caption.len() {
                let target = caption.get(k).copied().unwrap_or(special.sep);
                let mut prefix = Vec::with_capacity(k + 2);
                prefix.push(special.cls);
                prefix.extend_from_slice(&caption[..k]);
                prefix.push(special.mask);
                let batch = builder
                    .build_infer_batch(&prefix, &ex.blocks, &ex.regions)
                    .map_err(data_error(i))?;
                let fwd = encoder::forward(params, &batch)?;
                correct += usize::from(encoder::argmax(fwd.logits_at(k + 1)) as TokenId == target);
            }
            Ok((correct, caption.len() + 1))
        })
        .collect();
    let (mut correct, mut total) = (0, 0);
    for r in per_example {
        let (c, t) = r?;
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}
