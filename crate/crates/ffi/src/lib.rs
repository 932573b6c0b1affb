//! C interface: load a checkpoint, caption images, solve assignments.
//!
//! Every fallible call returns a [`VivoStatus`]. On failure a description is
//! kept per thread and can be read with [`vivo_last_error`]. Strings handed
//! out by the library are released with [`vivo_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use vivo::batch::{BatchBuilder, BatchConfig, GEOMETRY_DIM};
use vivo::corpus::{self, ImageTagRecord};
use vivo::decoder::{self, DecodeConfig, DecodeError};
use vivo::encoder::{self, EncoderError, Parameters};
use vivo::matching::{hungarian, CostMatrix};
use vivo::tokenizer::{self, TokenizerError, Vocabulary};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VivoStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Panic = 5,
}

/// Loaded model: parameters, vocabulary and input layout.
pub struct VivoModel {
    params: Parameters,
    vocab: Vocabulary,
    builder: BatchBuilder,
    d_app: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(VivoStatus, String);

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure(VivoStatus::InvalidArgument, message.into())
    }

    fn data(message: impl std::fmt::Display) -> Self {
        Failure(VivoStatus::Data, message.to_string())
    }
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VivoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VivoStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VivoStatus::Panic
        }
    }
}

fn require<T>(ptr: *const T, name: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        Err(Failure(VivoStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `ptr` is null or a NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    require(ptr, name)?;
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{name} is not UTF-8")))
}

fn load(checkpoint: &Path, vocab_path: &Path) -> Result<VivoModel, Failure> {
    let params = encoder::load(checkpoint).map_err(|e| match e {
        EncoderError::Io(io) => Failure(VivoStatus::Io, format!("{}: {io}", checkpoint.display())),
        other => Failure::data(format!("{}: {other}", checkpoint.display())),
    })?;
    let vocab = Vocabulary::load(vocab_path).map_err(|e| match e {
        TokenizerError::Io(io) => {
            Failure(VivoStatus::Io, format!("{}: {io}", vocab_path.display()))
        }
        other => Failure::data(format!("{}: {other}", vocab_path.display())),
    })?;
    if vocab.len() != params.config().vocab_size {
        return Err(Failure::data(format!(
            "vocabulary has {} entries, checkpoint expects {}",
            vocab.len(),
            params.config().vocab_size
        )));
    }
    let d_app = params
        .config()
        .d_region
        .checked_sub(GEOMETRY_DIM)
        .ok_or_else(|| Failure::data("checkpoint region width below geometry size"))?;
    let config = BatchConfig {
        d_app,
        ..BatchConfig::default()
    };
    let builder = BatchBuilder::new(config, &vocab).map_err(Failure::data)?;
    Ok(VivoModel {
        params,
        vocab,
        builder,
        d_app,
    })
}

/// Loads a checkpoint. When `vocab_path` is null, `vocab.txt` next to the
/// checkpoint is used. On success `*out` owns a model to be released with
/// [`vivo_model_free`].
///
/// # Safety
/// Paths are NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vivo_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut VivoModel,
) -> VivoStatus {
    guard(|| {
        require(out, "out")?;
        let checkpoint = PathBuf::from(read_str(checkpoint_path, "checkpoint_path")?);
        let vocab = if vocab_path.is_null() {
            checkpoint
                .parent()
                .unwrap_or(Path::new(""))
                .join("vocab.txt")
        } else {
            PathBuf::from(read_str(vocab_path, "vocab_path")?)
        };
        let model = load(&checkpoint, &vocab)?;
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// # Safety
/// `model` is null or came from [`vivo_model_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn vivo_model_free(model: *mut VivoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for a null model.
///
/// # Safety
/// `model` is null or a live model.
#[no_mangle]
pub unsafe extern "C" fn vivo_model_vocab_size(model: *const VivoModel) -> usize {
    model.as_ref().map_or(0, |m| m.vocab.len())
}

/// Appearance features expected per region, or 0 for a null model.
///
/// # Safety
/// `model` is null or a live model.
#[no_mangle]
pub unsafe extern "C" fn vivo_model_region_features(model: *const VivoModel) -> usize {
    model.as_ref().map_or(0, |m| m.d_app)
}

/// Number of scalar parameters, or 0 for a null model.
///
/// # Safety
/// `model` is null or a live model.
#[no_mangle]
pub unsafe extern "C" fn vivo_model_num_parameters(model: *const VivoModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_values())
}

/// Captions one image given as a JSON object with `image_size`, `regions`
/// and `tags` (the same layout as a line of the tag corpus).
///
/// `beam_width` 0 selects greedy decoding; otherwise constrained beam search
/// runs with that width, requiring every tag when `require_tags` is set.
/// `*out_caption` receives a string for [`vivo_string_free`]; `out_logprob`
/// may be null.
///
/// # Safety
/// `model` is a live model, `record_json` a NUL-terminated string,
/// `out_caption` writable and `out_logprob` null or writable.
#[no_mangle]
pub unsafe extern "C" fn vivo_caption(
    model: *const VivoModel,
    record_json: *const c_char,
    max_len: usize,
    beam_width: usize,
    require_tags: bool,
    out_caption: *mut *mut c_char,
    out_logprob: *mut f64,
) -> VivoStatus {
    guard(|| {
        require(model, "model")?;
        require(out_caption, "out_caption")?;
        let model = &*model;
        if max_len == 0 {
            return Err(Failure::invalid("max_len must be positive"));
        }
        let text = read_str(record_json, "record_json")?;
        let records: Vec<ImageTagRecord> = corpus::parse_jsonl(text).map_err(Failure::data)?;
        let [record] = &records[..] else {
            return Err(Failure::invalid(format!(
                "expected one record, found {}",
                records.len()
            )));
        };
        let examples =
            corpus::prepare_tag_records(std::slice::from_ref(record), &model.vocab, model.d_app)
                .map_err(Failure::data)?;
        let ex = &examples[0];
        let decoded = if beam_width == 0 {
            decoder::greedy_caption(
                &model.params,
                &model.builder,
                &ex.blocks,
                &ex.regions,
                max_len,
            )
        } else {
            let constraints = if require_tags {
                decoder::tag_constraints(&ex.blocks)
            } else {
                Vec::new()
            };
            let config = DecodeConfig {
                max_len,
                beam_width,
            };
            decoder::build_fsm(&constraints).and_then(|fsm| {
                decoder::cbs_caption(
                    &model.params,
                    &model.builder,
                    &ex.blocks,
                    &ex.regions,
                    &fsm,
                    &config,
                )
            })
        }
        .map_err(|e| match e {
            DecodeError::BadConfig(m) => Failure::invalid(m),
            other => Failure::data(other),
        })?;
        let caption =
            tokenizer::detokenize(&decoded.token_ids, &model.vocab).map_err(Failure::data)?;
        let caption = CString::new(caption).map_err(Failure::data)?;
        if !out_logprob.is_null() {
            *out_logprob = decoded.logprob;
        }
        *out_caption = caption.into_raw();
        Ok(())
    })
}

/// Minimum-cost assignment of an `n x n` row-major cost matrix.
/// `perm_out[i]` receives the column assigned to row `i`.
///
/// # Safety
/// `cost` holds `n * n` values, `perm_out` room for `n`, and `total_out` is
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn vivo_hungarian(
    cost: *const f64,
    n: usize,
    perm_out: *mut usize,
    total_out: *mut f64,
) -> VivoStatus {
    guard(|| {
        if n == 0 {
            return Err(Failure::invalid("n must be positive"));
        }
        require(cost, "cost")?;
        require(perm_out, "perm_out")?;
        let len = n
            .checked_mul(n)
            .ok_or_else(|| Failure::invalid("matrix too large"))?;
        let values = std::slice::from_raw_parts(cost, len);
        let matrix = CostMatrix::new(values.chunks(n).map(<[f64]>::to_vec).collect())
            .map_err(|e| Failure::invalid(e.to_string()))?;
        let result = hungarian(&matrix);
        std::slice::from_raw_parts_mut(perm_out, n).copy_from_slice(&result.perm);
        if !total_out.is_null() {
            *total_out = result.total_cost;
        }
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vivo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Description of the last failure on this thread; empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn vivo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}
