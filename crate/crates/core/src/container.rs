//! Versioned, checksummed model files.
//!
//! Layout (little-endian): magic `AMDL`, u32 format version, u32 kind tag,
//! u64 payload length, bincode payload, u64 FNV-1a checksum of every
//! preceding byte.

use std::fmt;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::acoustic::{BlstmAcousticModel, EpochLog};
use crate::corpus::write_atomic;
use crate::error::{Error, Result};
use crate::features::LdaTransform;
use crate::gmm::{DiagonalGmm, VadModel};
use crate::ivector::{RgTransform, TotalVariabilityModel};

pub const CONTAINER_MAGIC: &[u8; 4] = b"AMDL";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Gmm,
    Vad,
    Tv,
    Lda,
    Rg,
    Am,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Gmm => 1,
            ModelKind::Vad => 2,
            ModelKind::Tv => 3,
            ModelKind::Lda => 4,
            ModelKind::Rg => 5,
            ModelKind::Am => 6,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            1 => ModelKind::Gmm,
            2 => ModelKind::Vad,
            3 => ModelKind::Tv,
            4 => ModelKind::Lda,
            5 => ModelKind::Rg,
            6 => ModelKind::Am,
            _ => return None,
        })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Gmm => "GMM",
            ModelKind::Vad => "VAD",
            ModelKind::Tv => "TV",
            ModelKind::Lda => "LDA",
            ModelKind::Rg => "RG",
            ModelKind::Am => "AM",
        };
        f.write_str(s)
    }
}

/// A payload type with a fixed container kind.
pub trait Persist: Serialize + DeserializeOwned {
    const KIND: ModelKind;
}

impl Persist for DiagonalGmm {
    const KIND: ModelKind = ModelKind::Gmm;
}

impl Persist for VadModel {
    const KIND: ModelKind = ModelKind::Vad;
}

impl Persist for TotalVariabilityModel {
    const KIND: ModelKind = ModelKind::Tv;
}

impl Persist for LdaTransform {
    const KIND: ModelKind = ModelKind::Lda;
}

impl Persist for RgTransform {
    const KIND: ModelKind = ModelKind::Rg;
}

/// Acoustic model together with its training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticModelFile {
    pub model: BlstmAcousticModel,
    pub training_log: Vec<EpochLog>,
}

impl Persist for AcousticModelFile {
    const KIND: ModelKind = ModelKind::Am;
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode<T: Persist>(value: &T) -> Result<Vec<u8>> {
    let payload = bincode::serialize(value)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len() + 8);
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&T::KIND.tag().to_le_bytes());
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(&payload);
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

/// Validates framing and checksum; returns the kind and payload.
pub fn inspect(bytes: &[u8]) -> Result<(ModelKind, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let tag = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let end = HEADER_LEN.checked_add(len).ok_or(Error::Truncated)?;
    if bytes.len() < end + 8 {
        return Err(Error::Truncated);
    }
    let stored = u64::from_le_bytes(bytes[end..end + 8].try_into().unwrap());
    if checksum(&bytes[..end]) != stored {
        return Err(Error::ChecksumMismatch);
    }
    let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::invalid(format!("unknown model kind tag {tag}")))?;
    Ok((kind, &bytes[HEADER_LEN..end]))
}

pub fn decode<T: Persist>(bytes: &[u8]) -> Result<T> {
    let (kind, payload) = inspect(bytes)?;
    if kind != T::KIND {
        return Err(Error::KindMismatch {
            expected: T::KIND.to_string(),
            found: kind.to_string(),
        });
    }
    Ok(bincode::deserialize(payload)?)
}

pub fn save_model<T: Persist>(value: &T, path: &Path) -> Result<()> {
    write_atomic(path, &encode(value)?)
}

pub fn load_model<T: Persist>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}
