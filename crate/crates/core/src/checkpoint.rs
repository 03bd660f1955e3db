//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `SKDCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the
//! payload. The payload holds every parameter as little-endian `f64` in
//! manifest order, followed by the optimizer's first-moment buffers and then
//! its second-moment buffers, each in the same order and each only when
//! present. The header records the payload's SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SKDCKPT\0";
const PREAMBLE: usize = 8 + 4 + 8;

/// Per-parameter optimizer buffers and the number of updates applied so
/// far. SGD keeps its velocity in `first_moment` and leaves
/// `second_moment` empty.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: TransformerParams,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub step: u64,
    pub dev_perplexity: f64,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    fn validate(&self) -> Result<()> {
        if !(self.dev_perplexity.is_finite() && self.dev_perplexity > 0.0) {
            return Err(Error::InvalidInput(format!(
                "dev perplexity must be finite and positive, got {}",
                self.dev_perplexity
            )));
        }
        for buffers in [&self.optimizer.first_moment, &self.optimizer.second_moment] {
            let shapes_match = buffers.is_empty()
                || (buffers.len() == self.params.tensors().len()
                    && buffers
                        .iter()
                        .zip(self.params.tensors())
                        .all(|(v, p)| v.shape() == p.shape()));
            if !shapes_match {
                return Err(Error::InvalidInput(
                    "optimizer buffers do not match the parameters".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    step: u64,
    /// Bit pattern of the perplexity, so it survives the round trip exactly.
    dev_perplexity_bits: u64,
    optimizer_step: u64,
    has_first_moment: bool,
    has_second_moment: bool,
    params: Vec<ParamEntry>,
    payload_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes `ckpt` to bytes in the checkpoint file format.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let mut payload = Vec::with_capacity(8 * ckpt.params.num_scalars() * 3);
    let buffers = ckpt
        .params
        .tensors()
        .iter()
        .chain(&ckpt.optimizer.first_moment)
        .chain(&ckpt.optimizer.second_moment);
    for t in buffers {
        for v in t.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: ckpt.config().clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        dev_perplexity_bits: ckpt.dev_perplexity.to_bits(),
        optimizer_step: ckpt.optimizer.step,
        has_first_moment: !ckpt.optimizer.first_moment.is_empty(),
        has_second_moment: !ckpt.optimizer.second_moment.is_empty(),
        params: ckpt
            .params
            .shape_manifest()
            .into_iter()
            .map(|(name, shape)| ParamEntry { name, shape })
            .collect(),
        payload_sha256: sha256_hex(&payload),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses bytes written by [`encode_checkpoint`]. `origin` names the source
/// in error messages.
pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: origin.into(),
        reason,
    };
    if bytes.len() < PREAMBLE {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;

    let param_scalars: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    let copies = 1 + usize::from(header.has_first_moment) + usize::from(header.has_second_moment);
    let total_scalars = copies * param_scalars;
    let payload = &bytes[header_end..];
    if payload.len() != 8 * total_scalars {
        return Err(corrupt(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            8 * total_scalars
        )));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch".into()));
    }

    let mut scalars = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read_tensors = || -> Result<Vec<Tensor>> {
        header
            .params
            .iter()
            .map(|p| {
                let n = p.shape.iter().product();
                Tensor::new(p.shape.clone(), scalars.by_ref().take(n).collect())
            })
            .collect()
    };
    let tensors = read_tensors()?;
    let first_moment = if header.has_first_moment {
        read_tensors()?
    } else {
        Vec::new()
    };
    let second_moment = if header.has_second_moment {
        read_tensors()?
    } else {
        Vec::new()
    };

    let params = TransformerParams::from_tensors(&header.config, tensors)
        .map_err(|e| corrupt(format!("parameters do not fit the stored config: {e}")))?;
    let names_match = params
        .names()
        .zip(&header.params)
        .all(|(name, entry)| name == entry.name);
    if !names_match {
        return Err(corrupt(
            "parameter names do not match the stored config".into(),
        ));
    }
    let ckpt = Checkpoint {
        params,
        optimizer: OptimizerState {
            step: header.optimizer_step,
            first_moment,
            second_moment,
        },
        epoch: header.epoch,
        step: header.step,
        dev_perplexity: f64::from_bits(header.dev_perplexity_bits),
    };
    ckpt.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Loads a checkpoint and checks that it was built for the architecture in
/// `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if !ckpt.config().same_architecture(expected) {
        return Err(Error::ConfigMismatch(format!(
            "{} holds a {}-layer/{}-hidden/{}-vocab model, expected {}-layer/{}-hidden/{}-vocab",
            path.display(),
            ckpt.config().num_layers,
            ckpt.config().hidden_size,
            ckpt.config().vocab_size,
            expected.num_layers,
            expected.hidden_size,
            expected.vocab_size
        )));
    }
    Ok(ckpt)
}
