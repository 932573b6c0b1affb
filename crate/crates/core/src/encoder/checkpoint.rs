//! Checkpoint files: a UTF-8 manifest followed by a raw payload.
//!
//! ```text
//! VIVOCKPT 1\n
//! meta <key> <value>\n                       zero or more
//! tensor <name> <d0>x<d1>.. <offset> <bytes>\n one per tensor, in order
//! end <payload bytes>\n
//! <payload>
//! ```
//!
//! The payload is every tensor's values as little-endian IEEE-754 `f64`,
//! concatenated in manifest order; `offset` is relative to the start of the
//! payload. Keys and names contain no whitespace. A parameter checkpoint
//! carries `meta kind parameters` plus one `meta config.<field> <value>`
//! line per [`EncoderConfig`] field.

use std::fs;
use std::path::Path;

use super::{EncoderConfig, EncoderError, Parameters, Tensor};

const MAGIC: &str = "VIVOCKPT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(ToString::to_string).collect();
            let bytes = t.data.len() * 8;
            manifest.push_str(&format!(
                "tensor {} {} {offset} {bytes}\n",
                t.name,
                dims.join("x")
            ));
            offset += bytes;
        }
        manifest.push_str(&format!("end {offset}\n"));
        let mut out = manifest.into_bytes();
        out.reserve(offset);
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let corrupt = |m: String| EncoderError::CorruptCheckpoint(m);
        let mut cursor = 0usize;
        let mut next_line = || -> Result<&str, EncoderError> {
            let rest = &bytes[cursor..];
            let len = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt("truncated manifest".into()))?;
            cursor += len + 1;
            std::str::from_utf8(&rest[..len]).map_err(|_| corrupt("manifest is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(corrupt("bad magic line".into()));
        }
        let mut meta = Vec::new();
        let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        let payload_len;
        loop {
            let line = next_line()?;
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["meta", k, v] => meta.push((k.to_string(), v.to_string())),
                ["tensor", name, dims, offset, len] => {
                    let shape = dims
                        .split('x')
                        .map(str::parse)
                        .collect::<Result<Vec<usize>, _>>()
                        .map_err(|_| corrupt(format!("bad shape in {line:?}")))?;
                    let offset: usize = offset
                        .parse()
                        .map_err(|_| corrupt(format!("bad offset in {line:?}")))?;
                    let len: usize = len
                        .parse()
                        .map_err(|_| corrupt(format!("bad length in {line:?}")))?;
                    if len != shape.iter().product::<usize>() * 8 {
                        return Err(corrupt(format!("length does not match shape in {line:?}")));
                    }
                    let expected = entries.last().map_or(0, |e| e.2 + e.3);
                    if offset != expected {
                        return Err(corrupt(format!("non-contiguous offset in {line:?}")));
                    }
                    entries.push((name.to_string(), shape, offset, len));
                }
                ["end", len] => {
                    payload_len = len
                        .parse::<usize>()
                        .map_err(|_| corrupt(format!("bad payload length {len:?}")))?;
                    break;
                }
                _ => return Err(corrupt(format!("unrecognized manifest line {line:?}"))),
            }
        }
        let declared = entries.last().map_or(0, |e| e.2 + e.3);
        if declared != payload_len {
            return Err(corrupt(format!(
                "tensors declare {declared} bytes, manifest end says {payload_len}"
            )));
        }
        let payload = &bytes[cursor..];
        if payload.len() != payload_len {
            return Err(corrupt(format!(
                "payload has {} bytes, expected {payload_len}",
                payload.len()
            )));
        }
        let tensors = entries
            .into_iter()
            .map(|(name, shape, offset, len)| {
                let data = payload[offset..offset + len]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self { meta, tensors })
    }
}

pub fn write_tensor_file(path: &Path, file: &TensorFile) -> Result<(), EncoderError> {
    crate::io::write_atomic(path, &file.to_bytes())?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile, EncoderError> {
    TensorFile::from_bytes(&fs::read(path)?)
}

pub(crate) fn config_meta(c: &EncoderConfig) -> Vec<(String, String)> {
    vec![
        ("config.layers".into(), c.layers.to_string()),
        ("config.hidden".into(), c.hidden.to_string()),
        ("config.heads".into(), c.heads.to_string()),
        ("config.ff_dim".into(), c.ff_dim.to_string()),
        ("config.vocab_size".into(), c.vocab_size.to_string()),
        ("config.max_positions".into(), c.max_positions.to_string()),
        ("config.n_segments".into(), c.n_segments.to_string()),
        ("config.d_region".into(), c.d_region.to_string()),
        ("config.tie_head".into(), c.tie_head.to_string()),
        // {:?} prints the shortest representation that parses back exactly
        ("config.dropout".into(), format!("{:?}", c.dropout)),
        ("config.init_std".into(), format!("{:?}", c.init_std)),
    ]
}

pub(crate) fn config_from_meta(file: &TensorFile) -> Result<EncoderConfig, EncoderError> {
    fn field<T: std::str::FromStr>(file: &TensorFile, key: &str) -> Result<T, EncoderError> {
        let raw = file
            .meta(key)
            .ok_or_else(|| EncoderError::CorruptCheckpoint(format!("missing {key}")))?;
        raw.parse()
            .map_err(|_| EncoderError::CorruptCheckpoint(format!("bad value {raw:?} for {key}")))
    }
    Ok(EncoderConfig {
        layers: field(file, "config.layers")?,
        hidden: field(file, "config.hidden")?,
        heads: field(file, "config.heads")?,
        ff_dim: field(file, "config.ff_dim")?,
        vocab_size: field(file, "config.vocab_size")?,
        max_positions: field(file, "config.max_positions")?,
        n_segments: field(file, "config.n_segments")?,
        d_region: field(file, "config.d_region")?,
        tie_head: field(file, "config.tie_head")?,
        dropout: field(file, "config.dropout")?,
        init_std: field(file, "config.init_std")?,
    })
}

impl Parameters {
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut meta = vec![("kind".to_string(), "parameters".to_string())];
        meta.extend(config_meta(&self.config));
        TensorFile {
            meta,
            tensors: self.tensors.clone(),
        }
    }

    pub fn from_tensor_file(file: TensorFile) -> Result<Self, EncoderError> {
        if file.meta("kind") != Some("parameters") {
            return Err(EncoderError::CorruptCheckpoint(
                "not a parameter checkpoint".into(),
            ));
        }
        let config = config_from_meta(&file)?;
        Parameters::from_tensors(&config, file.tensors).map_err(|e| match e {
            EncoderError::ShapeMismatch(m) | EncoderError::BadConfig(m) => {
                EncoderError::CorruptCheckpoint(m)
            }
            other => other,
        })
    }
}

pub fn save(params: &Parameters, path: impl AsRef<Path>) -> Result<(), EncoderError> {
    write_tensor_file(path.as_ref(), &params.to_tensor_file())
}

pub fn load(path: impl AsRef<Path>) -> Result<Parameters, EncoderError> {
    Parameters::from_tensor_file(read_tensor_file(path.as_ref())?)
}

/// Loads a checkpoint and checks that it was written for `expected`.
pub fn load_with_config(
    path: impl AsRef<Path>,
    expected: &EncoderConfig,
) -> Result<Parameters, EncoderError> {
    let params = load(path)?;
    if params.config() != expected {
        let want = Parameters::names(expected);
        let got = Parameters::names(params.config());
        let mut diffs = Vec::new();
        for ((wn, ws), (gn, gs)) in want.iter().zip(&got) {
            if wn != gn || ws != gs {
                diffs.push(format!("{wn}: expected {ws:?}, found {gn} {gs:?}"));
            }
        }
        if want.len() != got.len() {
            diffs.push(format!(
                "expected {} tensors, found {}",
                want.len(),
                got.len()
            ));
        }
        if diffs.is_empty() {
            diffs.push(format!(
                "config differs: expected {expected:?}, found {:?}",
                params.config()
            ));
        }
        return Err(EncoderError::CorruptCheckpoint(diffs.join("; ")));
    }
    Ok(params)
}
