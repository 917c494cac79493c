//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ESMCCKPT"
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON
//! payload    f64 values, parameter groups concatenated in header order
//! checksum   32 bytes SHA-256 over every preceding byte
//! ```
//!
//! The JSON header carries `variant`, `model` (architecture), `schema`,
//! `schema_hash`, `seed`, `weights` and `groups` (`[name, length]` pairs).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, Variant};
use crate::embedding::FeatureSchema;
use crate::nn::Parameters;
use crate::objective::LossWeights;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ESMCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    variant: Variant,
    model: ModelConfig,
    schema: FeatureSchema,
    schema_hash: String,
    seed: u64,
    weights: LossWeights,
    groups: Vec<(String, usize)>,
}

/// A loaded checkpoint: parameters plus the loss weights they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub weights: LossWeights,
}

pub fn save_checkpoint(path: &Path, model: &Model, weights: &LossWeights) -> Result<()> {
    let groups = model.param_groups();
    let header = Header {
        variant: model.variant(),
        model: model.config().clone(),
        schema: model.schema().clone(),
        schema_hash: model.schema().hash(),
        seed: model.config().seed,
        weights: weights.clone(),
        groups: groups.iter().map(|(n, g)| (n.clone(), g.len())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n_values: usize = groups.iter().map(|(_, g)| g.len()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 * n_values + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, g) in &groups {
        for v in g.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("file truncated while reading {what}")))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

/// Loads and verifies a checkpoint. When `expected_schema` is given, the
/// stored schema must match it exactly.
pub fn load_checkpoint(path: &Path, expected_schema: Option<&FeatureSchema>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(Error::Checkpoint("file truncated".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Checkpoint("checksum mismatch (file corrupt or truncated)".into()));
    }
    let mut at = 8;
    let version = u32::from_le_bytes(take(body, &mut at, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(take(body, &mut at, 8, "header length")?.try_into().unwrap());
    let header_len = usize::try_from(header_len)
        .map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(body, &mut at, header_len, "header")?)?;
    header.schema.validate()?;
    if header.schema.hash() != header.schema_hash {
        return Err(Error::Checkpoint("stored schema does not match its hash".into()));
    }
    if let Some(expected) = expected_schema {
        if expected != &header.schema {
            return Err(Error::Schema(format!(
                "checkpoint schema {} differs from expected schema {}",
                header.schema_hash,
                expected.hash()
            )));
        }
    }
    if header.model.variant != header.variant || header.model.seed != header.seed {
        return Err(Error::Checkpoint("header fields disagree".into()));
    }
    header.weights.validate(header.variant)?;
    let mut model = Model::new(header.model, header.schema)?;
    {
        let mut groups = model.param_groups_mut();
        if groups.len() != header.groups.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter groups stored, model has {}",
                header.groups.len(),
                groups.len()
            )));
        }
        for ((name, dst), (stored_name, len)) in groups.iter_mut().zip(&header.groups) {
            if name != stored_name || dst.len() != *len {
                return Err(Error::Checkpoint(format!(
                    "parameter group {stored_name}[{len}] does not fit {name}[{}]",
                    dst.len()
                )));
            }
            let raw = take(body, &mut at, 8 * len, "payload")?;
            for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    if at != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        model,
        weights: header.weights,
    })
}
