//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `MOXCKPT1`                          |
//! | 8      | 4    | format version (`u32`)                    |
//! | 12     | 4    | header length `h` in bytes (`u32`)        |
//! | 16     | h    | UTF-8 JSON header                         |
//! | 16 + h | 4·n  | parameters as `f32`, in manifest order    |
//!
//! Parameters are stored at 32-bit precision. Loading widens back to `f64`,
//! so a round trip quantizes once and is idempotent afterwards.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MOXCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

/// What produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ref,
    Mem,
    For,
    Oracle,
    Baseline,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Ref => "ref",
            Provenance::Mem => "mem",
            Provenance::For => "for",
            Provenance::Oracle => "oracle",
            Provenance::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything in a checkpoint except the parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub provenance: Provenance,
    /// Free-form creation details (scenario, method, seed, α ...). Sorted
    /// keys keep the header byte-stable.
    pub created: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, theta: &ParamStore, provenance: Provenance) -> Self {
        let params =
            theta.iter().map(|(name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() }).collect();
        Self { model, params, provenance, created: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.created.insert(key.to_string(), value.to_string());
        self
    }

    fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// The values a checkpoint round trip produces: every entry rounded to the
/// nearest `f32`.
pub fn quantize(theta: &ParamStore) -> ParamStore {
    theta.map(|x| x as f32 as f64)
}

pub fn encode_checkpoint(theta: &ParamStore, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.params.len() != theta.len()
        || meta.params.iter().zip(theta.iter()).any(|(e, (n, t))| e.name != n || e.shape != t.shape())
    {
        return Err(Error::StructuralMismatch("checkpoint manifest does not describe the parameters".into()));
    }
    let header = serde_json::to_vec(meta)?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::arg("checkpoint header too large"))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 4 * theta.total_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for x in theta.values() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, CheckpointMeta)> {
    let format = |offset: usize, reason: String| Error::Format { offset: offset as u64, reason };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format(0, "bad magic".into()));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(format(bytes.len(), "truncated prefix".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"));
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(format(8, format!("unsupported format version {version}")));
    }
    let header_len = u32_at(12) as usize;
    let payload_at = PREFIX_LEN + header_len;
    if bytes.len() < payload_at {
        return Err(format(bytes.len(), format!("header of {header_len} bytes is truncated")));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[PREFIX_LEN..payload_at])
        .map_err(|e| format(PREFIX_LEN, format!("invalid header: {e}")))?;
    let expected = 4 * meta.total_len();
    let payload = &bytes[payload_at..];
    if payload.len() != expected {
        return Err(format(
            payload_at + payload.len().min(expected),
            format!("payload is {} bytes, manifest needs {expected}", payload.len()),
        ));
    }
    let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64);
    let mut entries = Vec::with_capacity(meta.params.len());
    for p in &meta.params {
        let n = p.shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        entries.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
    }
    Ok((ParamStore::new(entries)?, meta))
}

/// Writes through a sibling temporary file so readers never observe a
/// partial checkpoint.
pub fn save_checkpoint(theta: &ParamStore, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(theta, meta)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Transformer;

    fn sample() -> (ParamStore, CheckpointMeta) {
        let config = ModelConfig { vocab_size: 8, ctx_len: 6, d_model: 4, n_layers: 1, n_heads: 2, d_ff: 8, seed: 3 };
        let theta = Transformer::new(config.clone()).unwrap().init_params();
        let meta = CheckpointMeta::new(config, &theta, Provenance::Ref).with("seed", 3);
        (theta, meta)
    }

    #[test]
    fn round_trip_quantizes_once() {
        let (theta, meta) = sample();
        let bytes = encode_checkpoint(&theta, &meta).unwrap();
        let (once, meta2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(once, quantize(&theta));
        let (twice, _) = decode_checkpoint(&encode_checkpoint(&once, &meta).unwrap()).unwrap();
        assert_eq!(twice, once);
        assert_eq!(encode_checkpoint(&theta, &meta).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let (theta, meta) = sample();
        let bytes = encode_checkpoint(&theta, &meta).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 8, .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint(cut), Err(Error::Format { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..5]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn manifest_must_match() {
        let (theta, mut meta) = sample();
        meta.params.pop();
        assert!(matches!(encode_checkpoint(&theta, &meta), Err(Error::StructuralMismatch(_))));
    }
}
