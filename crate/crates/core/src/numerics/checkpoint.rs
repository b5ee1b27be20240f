//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "SPLT" | version: u32 | meta_len: u32 | meta: UTF-8 JSON | params: f32…
//! ```
//!
//! Parameter tensors follow in declaration order; their shapes are implied
//! by the `arch` recorded in the metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MemberModel;
use crate::archspec::ArchSpec;
use crate::{Error, Result, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPLT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec_hash: String,
    pub member_index: usize,
    pub epoch: usize,
    pub seed: u64,
    pub arch: ArchSpec,
}

pub fn encode_checkpoint<T: Scalar>(model: &MemberModel<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &MemberModel<T>, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode_checkpoint(model, meta)).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::validation("checkpoint truncated"));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32> {
    let b = take(bytes, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses a checkpoint and rebuilds the member it describes.
pub fn read_checkpoint<T: Scalar>(mut bytes: &[u8]) -> Result<(CheckpointMeta, MemberModel<T>)> {
    if take(&mut bytes, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::validation("not a checkpoint (bad magic)"));
    }
    let version = take_u32(&mut bytes)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::validation(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = take_u32(&mut bytes)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut bytes, meta_len)?)?;
    let mut model = MemberModel::<T>::from_arch(&meta.arch)?.with_member_index(meta.member_index);
    if bytes.len() != 4 * model.num_parameters() {
        return Err(Error::validation(format!(
            "checkpoint holds {} parameter bytes, architecture needs {}",
            bytes.len(),
            4 * model.num_parameters()
        )));
    }
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            let b = take(&mut bytes, 4)?;
            *v = T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
    }
    Ok((meta, model))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointMeta, MemberModel<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
