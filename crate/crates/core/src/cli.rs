//! The `vivo` command-line tool.
//!
//! Every command is deterministic given its inputs and seed, and writes its
//! outputs atomically into `--out`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{BatchBuilder, BatchError, GEOMETRY_DIM};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, CorpusError, Example, ImageCaptionRecord, ImageTagRecord};
use crate::decoder::{self, DecodeConfig, DecodeError, Decoded};
use crate::encoder::{self, EncoderError, Parameters};
use crate::probe::{self, ObjectClass, Pooling, ProbeError};
use crate::synthetic::{self, SyntheticError};
use crate::tokenizer::{self, TokenizerError, Vocabulary};
use crate::trainer::{self, TrainError, TrainOutcome, TrainState};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Io(_) => CliError::Io(e.to_string()),
            EncoderError::BadConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) => CliError::Config(e.to_string()),
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::Encoder(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BatchError> for CliError {
    fn from(e: BatchError) -> Self {
        match e {
            BatchError::BadConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Encoder(inner) => inner.into(),
            DecodeError::Batch(inner) => inner.into(),
            DecodeError::BadConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Encoder(inner) => inner.into(),
            ProbeError::Io { .. } => CliError::Io(e.to_string()),
            ProbeError::Batch { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<SyntheticError> for CliError {
    fn from(e: SyntheticError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vivo",
    version,
    about = "Masked tag pre-training and novel-object captioning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked tag prediction on image-tag records.
    Pretrain(TrainArgs),
    /// Caption training on image-caption records.
    Finetune(TrainArgs),
    /// Generate captions for image-tag records.
    Caption(CaptionArgs),
    /// Alignment scores, embedding export or object-mention F1.
    Probe(ProbeArgs),
    /// Write a synthetic world with held-out classes.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Validate the config and corpus and build one batch, without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image records (JSONL); any caption field is ignored.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Supplies the `[batch]` and `[decode]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Accepted for uniformity; decoding draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Constrained beam search instead of greedy decoding.
    #[arg(long)]
    pub cbs: bool,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Phrases every caption must contain, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub constraints: Vec<String>,
    /// Also require each image's own tags.
    #[arg(long)]
    pub tag_constraints: bool,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeMode {
    Align,
    Export,
    F1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Mean,
    First,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::First => Pooling::First,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Required unless `--mode f1` is given `--captions`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ProbeMode,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "mean")]
    pub pooling: PoolingArg,
    /// Generated captions (`vivo caption` output) for `--mode f1`; decoded
    /// greedily from the checkpoint when absent.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// JSON array of `{"name", "synonyms"}` classes for `--mode f1`;
    /// defaults to every distinct tag of the input.
    #[arg(long)]
    pub classes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Supplies the `[synthetic]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// One line of `captions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub caption: String,
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AlignmentLine {
    id: String,
    scores: Vec<probe::AlignmentScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AlignmentSummary {
    auc: f64,
    matched_pairs: usize,
    mismatched_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorldSummary {
    classes: Vec<String>,
    novel: Vec<String>,
    centers: Vec<Vec<f64>>,
}

/// Runs a parsed command and returns the lines to print on success.
pub fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::Pretrain(args) => cmd_train(&args, false),
        Command::Finetune(args) => cmd_train(&args, true),
        Command::Caption(args) => cmd_caption(&args),
        Command::Probe(args) => cmd_probe(&args),
        Command::GenSynthetic(args) => cmd_gen_synthetic(&args),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    crate::io::write_atomic(path, bytes).map_err(|e| CliError::io(path, e))
}

fn to_json_lines<T: Serialize>(items: &[T]) -> String {
    corpus::to_jsonl(items)
}

fn load_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    Vocabulary::load(path).map_err(|e| match e {
        TokenizerError::Io(io) => CliError::io(path, io),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

fn load_params(path: &Path) -> Result<Parameters, CliError> {
    encoder::load(path).map_err(|e| match e {
        EncoderError::Io(io) => CliError::io(path, io),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new("")).join(name)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        config.set_seed(seed);
    }
    Ok(config)
}

/// Vocabulary for a training run: the configured file, else the one stored
/// beside the starting checkpoint, else every word of the corpus.
fn training_vocab(config: &RunConfig, texts: &[&str]) -> Result<Vocabulary, CliError> {
    if let Some(path) = &config.data.vocab {
        return load_vocab(path);
    }
    for start in [&config.data.resume, &config.data.init]
        .into_iter()
        .flatten()
    {
        let candidate = sibling(start, VOCAB_FILE);
        if candidate.exists() {
            return load_vocab(&candidate);
        }
        // checkpoints written during training live one level down
        let candidate = sibling(start.parent().unwrap_or(Path::new("")), VOCAB_FILE);
        if candidate.exists() {
            return load_vocab(&candidate);
        }
    }
    Ok(corpus::word_vocabulary(texts.iter().copied()))
}

fn initial_state(config: &RunConfig) -> Result<TrainState, CliError> {
    if let Some(resume) = &config.data.resume {
        let optim = resume.with_extension("optim");
        let state = TrainState::load(resume, &optim).map_err(|e| match e {
            TrainError::Encoder(EncoderError::Io(io)) => CliError::io(resume, io),
            other => CliError::Data(format!("{}: {other}", resume.display())),
        })?;
        check_shape(state.params.config(), &config.model, resume)?;
        return Ok(state);
    }
    if let Some(init) = &config.data.init {
        let params = load_params(init)?;
        check_shape(params.config(), &config.model, init)?;
        return Ok(TrainState::new(params));
    }
    Ok(TrainState::new(Parameters::init(
        &config.model,
        config.train.seed,
    )?))
}

fn check_shape(
    found: &encoder::EncoderConfig,
    expected: &encoder::EncoderConfig,
    path: &Path,
) -> Result<(), CliError> {
    if Parameters::names(found) != Parameters::names(expected) {
        return Err(CliError::Config(format!(
            "{} was trained with a different model shape than [model] describes",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, captions: bool) -> Result<Vec<String>, CliError> {
    let mut config = load_config(Some(&args.config), args.seed)?;
    let train_path = config
        .data
        .train
        .clone()
        .ok_or_else(|| CliError::Config("data.train is required".into()))?;
    let (tag_records, caption_records) = if captions {
        let r: Vec<ImageCaptionRecord> = corpus::read_jsonl(&train_path)?;
        (
            r.iter()
                .map(ImageCaptionRecord::tag_record)
                .collect::<Vec<_>>(),
            Some(r),
        )
    } else {
        (corpus::read_jsonl::<ImageTagRecord>(&train_path)?, None)
    };
    if tag_records.is_empty() {
        return Err(CliError::Data(format!(
            "{}: corpus is empty",
            train_path.display()
        )));
    }
    let mut texts: Vec<&str> = tag_records
        .iter()
        .flat_map(|r| r.tags.iter().map(String::as_str))
        .collect();
    if let Some(c) = &caption_records {
        texts.extend(c.iter().map(|r| r.caption.as_str()));
    }
    let vocab = training_vocab(&config, &texts)?;
    config.resolve_model(vocab.len())?;
    config.model.validate()?;
    config.train.validate()?;
    let builder = BatchBuilder::new(config.batch.clone(), &vocab)?;
    let examples: Vec<Example> = match &caption_records {
        Some(r) => corpus::prepare_caption_records(r, &vocab, config.batch.d_app)?,
        None => corpus::prepare_tag_records(&tag_records, &vocab, config.batch.d_app)?,
    };
    let state = initial_state(&config)?;

    let first = &examples[0];
    match &first.caption {
        Some(c) => {
            builder.build_finetune_batch(c, &first.blocks, &first.regions, config.train.seed)?
        }
        None => builder.build_pretrain_batch(&first.blocks, &first.regions, config.train.seed)?,
    };
    let summary = format!(
        "{} records, vocabulary {}, {} parameters",
        examples.len(),
        vocab.len(),
        state.params.num_values()
    );
    if args.dry_run {
        return Ok(vec![format!("ok: {summary}")]);
    }

    create_dir(&args.out)?;
    let mut train = config.train.clone();
    train.checkpoint_dir = Some(args.out.join("checkpoints"));
    let TrainOutcome { state, report } = if captions {
        trainer::finetune(&examples, &builder, &train, state)?
    } else {
        trainer::pretrain(&examples, &builder, &train, state)?
    };
    let model_path = args.out.join(MODEL_FILE);
    encoder::save(&state.params, &model_path).map_err(|e| CliError::io(&model_path, e))?;
    vocab
        .save(args.out.join(VOCAB_FILE))
        .map_err(|e| CliError::io(&args.out.join(VOCAB_FILE), e))?;
    write_file(&args.out.join("report.jsonl"), report.to_jsonl().as_bytes())?;
    write_file(&args.out.join("config.toml"), config.to_toml().as_bytes())?;

    let mut lines = vec![format!("trained {} steps on {summary}", state.step)];
    if let Some(e) = report.last_eval() {
        lines.push(serde_json::to_string(e).expect("eval serializes"));
    }
    lines.push(format!("wrote {}", model_path.display()));
    Ok(lines)
}

/// Model, vocabulary and batch builder for commands that read a checkpoint.
struct Loaded {
    params: Parameters,
    vocab: Vocabulary,
    builder: BatchBuilder,
    config: RunConfig,
}

fn load_model(
    checkpoint: &Path,
    vocab: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<Loaded, CliError> {
    let mut config = load_config(config, seed)?;
    let params = load_params(checkpoint)?;
    let vocab_path = vocab
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sibling(checkpoint, VOCAB_FILE));
    let vocab = load_vocab(&vocab_path)?;
    if vocab.len() != params.config().vocab_size {
        return Err(CliError::Data(format!(
            "{} has {} entries but {} expects {}",
            vocab_path.display(),
            vocab.len(),
            checkpoint.display(),
            params.config().vocab_size
        )));
    }
    config.batch.d_app = params
        .config()
        .d_region
        .checked_sub(GEOMETRY_DIM)
        .ok_or_else(|| {
            CliError::Data(format!(
                "{}: region width below geometry size",
                checkpoint.display()
            ))
        })?;
    let builder = BatchBuilder::new(config.batch.clone(), &vocab)?;
    Ok(Loaded {
        params,
        vocab,
        builder,
        config,
    })
}

fn decode_all(
    loaded: &Loaded,
    examples: &[Example],
    cbs: Option<(&[Vec<tokenizer::TokenId>], bool)>,
    decode: &DecodeConfig,
) -> Result<Vec<Decoded>, CliError> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let result = match cbs {
                None => decoder::greedy_caption(
                    &loaded.params,
                    &loaded.builder,
                    &ex.blocks,
                    &ex.regions,
                    decode.max_len,
                ),
                Some((fixed, with_tags)) => {
                    let mut constraints = fixed.to_vec();
                    if with_tags {
                        constraints.extend(decoder::tag_constraints(&ex.blocks));
                    }
                    decoder::build_fsm(&constraints).and_then(|fsm| {
                        decoder::cbs_caption(
                            &loaded.params,
                            &loaded.builder,
                            &ex.blocks,
                            &ex.regions,
                            &fsm,
                            decode,
                        )
                    })
                }
            };
            result.map_err(|e| match CliError::from(e) {
                CliError::Data(m) => CliError::Data(format!("record {i}: {m}")),
                other => other,
            })
        })
        .collect()
}

fn caption_lines(
    loaded: &Loaded,
    examples: &[Example],
    decoded: &[Decoded],
) -> Result<Vec<CaptionLine>, CliError> {
    examples
        .iter()
        .zip(decoded)
        .map(|(ex, d)| {
            Ok(CaptionLine {
                id: ex.id.clone(),
                caption: tokenizer::detokenize(&d.token_ids, &loaded.vocab)
                    .map_err(|e| CliError::Data(e.to_string()))?,
                token_logprobs: d.token_logprobs.clone(),
            })
        })
        .collect()
}

fn cmd_caption(args: &CaptionArgs) -> Result<Vec<String>, CliError> {
    let loaded = load_model(
        &args.checkpoint,
        args.vocab.as_deref(),
        args.config.as_deref(),
        args.seed,
    )?;
    let mut decode = loaded.config.decode;
    if let Some(b) = args.beam {
        decode.beam_width = b;
    }
    if let Some(m) = args.max_len {
        decode.max_len = m;
    }
    if !args.cbs && (args.beam.is_some() || !args.constraints.is_empty() || args.tag_constraints) {
        return Err(CliError::Config(
            "--beam and constraints require --cbs".into(),
        ));
    }
    let records: Vec<ImageTagRecord> = corpus::read_jsonl(&args.input)?;
    let examples = corpus::prepare_tag_records(&records, &loaded.vocab, loaded.config.batch.d_app)?;
    let fixed: Vec<Vec<tokenizer::TokenId>> = args
        .constraints
        .iter()
        .filter(|c| !c.trim().is_empty())
        .map(|c| {
            tokenizer::tokenize(c, &loaded.vocab)
                .map_err(|e| CliError::Data(format!("constraint {c:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let decoded = decode_all(
        &loaded,
        &examples,
        args.cbs.then_some((&fixed[..], args.tag_constraints)),
        &decode,
    )?;
    let lines = caption_lines(&loaded, &examples, &decoded)?;
    create_dir(&args.out)?;
    let path = args.out.join("captions.jsonl");
    write_file(&path, to_json_lines(&lines).as_bytes())?;
    Ok(vec![format!(
        "wrote {} captions to {}",
        lines.len(),
        path.display()
    )])
}

fn cmd_probe(args: &ProbeArgs) -> Result<Vec<String>, CliError> {
    let records: Vec<ImageTagRecord> = corpus::read_jsonl(&args.input)?;
    let pooling = Pooling::from(args.pooling);
    let need_model = args.mode != ProbeMode::F1 || args.captions.is_none();
    let loaded = match (&args.checkpoint, need_model) {
        (Some(c), _) => Some(load_model(
            c,
            args.vocab.as_deref(),
            args.config.as_deref(),
            args.seed,
        )?),
        (None, true) => {
            return Err(CliError::Config(
                "--checkpoint is required for this mode".into(),
            ))
        }
        (None, false) => None,
    };
    create_dir(&args.out)?;
    match args.mode {
        ProbeMode::Align => {
            let loaded = loaded.expect("model loaded");
            let examples =
                corpus::prepare_tag_records(&records, &loaded.vocab, loaded.config.batch.d_app)?;
            let lines: Vec<AlignmentLine> = examples
                .iter()
                .map(|ex| {
                    Ok(AlignmentLine {
                        id: ex.id.clone(),
                        scores: probe::align(
                            &loaded.params,
                            &loaded.builder,
                            &ex.blocks,
                            &ex.regions,
                            pooling,
                        )?,
                    })
                })
                .collect::<Result<_, ProbeError>>()?;
            let path = args.out.join("alignment.jsonl");
            write_file(&path, to_json_lines(&lines).as_bytes())?;
            let mut out = vec![format!("wrote {}", path.display())];
            let (pos, neg) =
                probe::labelled_pair_scores(&loaded.params, &loaded.builder, &examples, pooling)?;
            if !pos.is_empty() && !neg.is_empty() {
                let summary = AlignmentSummary {
                    auc: probe::ranking_auc(&pos, &neg),
                    matched_pairs: pos.len(),
                    mismatched_pairs: neg.len(),
                };
                let text = serde_json::to_string(&summary).expect("summary serializes");
                write_file(
                    &args.out.join("alignment_summary.json"),
                    format!("{text}\n").as_bytes(),
                )?;
                out.push(text);
            }
            Ok(out)
        }
        ProbeMode::Export => {
            let loaded = loaded.expect("model loaded");
            let examples =
                corpus::prepare_tag_records(&records, &loaded.vocab, loaded.config.batch.d_app)?;
            let path = args.out.join("embeddings.tsv");
            probe::export_embeddings(&loaded.params, &loaded.builder, &examples, pooling, &path)?;
            Ok(vec![format!("wrote {}", path.display())])
        }
        ProbeMode::F1 => {
            let generated: Vec<String> = match &args.captions {
                Some(path) => {
                    let lines: Vec<CaptionLine> = corpus::read_jsonl(path)?;
                    let by_id: BTreeMap<&str, &str> = lines
                        .iter()
                        .map(|l| (l.id.as_str(), l.caption.as_str()))
                        .collect();
                    records
                        .iter()
                        .map(|r| {
                            by_id
                                .get(r.id.as_str())
                                .map(|c| c.to_string())
                                .ok_or_else(|| {
                                    CliError::Data(format!(
                                        "{}: no caption for image {:?}",
                                        path.display(),
                                        r.id
                                    ))
                                })
                        })
                        .collect::<Result<_, _>>()?
                }
                None => {
                    let loaded = loaded.as_ref().expect("model loaded");
                    let examples = corpus::prepare_tag_records(
                        &records,
                        &loaded.vocab,
                        loaded.config.batch.d_app,
                    )?;
                    let decoded = decode_all(loaded, &examples, None, &loaded.config.decode)?;
                    caption_lines(loaded, &examples, &decoded)?
                        .into_iter()
                        .map(|l| l.caption)
                        .collect()
                }
            };
            let classes: Vec<ObjectClass> = match &args.classes {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
                }
                None => records
                    .iter()
                    .flat_map(|r| r.tags.iter().map(|t| tokenizer::normalize(t)))
                    .collect::<BTreeSet<_>>()
                    .iter()
                    .map(|t| ObjectClass::new(t))
                    .collect(),
            };
            let truth: Vec<Vec<String>> = records.iter().map(|r| r.tags.clone()).collect();
            let scores = probe::mention_f1(&generated, &truth, &classes);
            let text = serde_json::to_string_pretty(&scores).expect("scores serialize");
            let path = args.out.join("f1.json");
            write_file(&path, format!("{text}\n").as_bytes())?;
            Ok(vec![format!(
                "precision {:.4} recall {:.4} f1 {:.4}",
                scores.precision, scores.recall, scores.f1
            )])
        }
    }
}

fn cmd_gen_synthetic(args: &GenArgs) -> Result<Vec<String>, CliError> {
    let config = load_config(args.config.as_deref(), args.seed)?;
    let world = synthetic::generate(&config.synthetic)?;
    create_dir(&args.out)?;
    let out = |name: &str| args.out.join(name);
    write_file(
        &out("tags.jsonl"),
        to_json_lines(&world.tag_records).as_bytes(),
    )?;
    write_file(
        &out("captions.jsonl"),
        to_json_lines(&world.caption_records).as_bytes(),
    )?;
    write_file(
        &out("test.jsonl"),
        to_json_lines(&world.test_records).as_bytes(),
    )?;
    world
        .vocabulary()
        .save(out(VOCAB_FILE))
        .map_err(|e| CliError::io(&out(VOCAB_FILE), e))?;
    let classes: Vec<ObjectClass> = world.classes.iter().map(|c| ObjectClass::new(c)).collect();
    write_file(
        &out("classes.json"),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&classes).expect("classes serialize")
        )
        .as_bytes(),
    )?;
    let summary = WorldSummary {
        classes: world.classes.clone(),
        novel: world.novel.clone(),
        centers: world.centers.clone(),
    };
    write_file(
        &out("world.json"),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).expect("world serializes")
        )
        .as_bytes(),
    )?;
    Ok(vec![format!(
        "wrote {} tag, {} caption and {} test records to {} (novel: {})",
        world.tag_records.len(),
        world.caption_records.len(),
        world.test_records.len(),
        args.out.display(),
        world.novel.join(", ")
    )])
}
