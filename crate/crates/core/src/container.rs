//! Binary container shared by dataset and checkpoint files.
//!
//! ```text
//! offset  size  field
//! 0       8     magic (ASCII, format specific)
//! 8       4     format version, u32 little-endian
//! 12      4     header length H, u32 little-endian
//! 16      H     header, UTF-8 JSON object
//! 16+H    P     payload; P and its SHA-256 are recorded in the header
//! ```

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FormatError, Result};

const PREFIX: usize = 16;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    payload_bytes: u64,
    payload_sha256: String,
    #[serde(flatten)]
    body: T,
}

pub(crate) fn encode<T: Serialize>(magic: &[u8; 8], version: u32, body: &T, payload: &[u8]) -> Result<Vec<u8>> {
    let envelope = Envelope {
        payload_bytes: payload.len() as u64,
        payload_sha256: crate::hex(&Sha256::digest(payload)),
        body,
    };
    let header = serde_json::to_vec(&envelope).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits and verifies a container, returning the header body and payload.
pub(crate) fn decode<'a, T: DeserializeOwned>(bytes: &'a [u8], magic: &[u8; 8], version: u32) -> Result<(T, &'a [u8])> {
    if bytes.len() < PREFIX {
        if !magic.starts_with(&bytes[..bytes.len().min(8)]) {
            return Err(bad_magic(magic).into());
        }
        return Err(FormatError::Truncated { needed: PREFIX, found: bytes.len() }.into());
    }
    if &bytes[..8] != magic {
        return Err(bad_magic(magic).into());
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(FormatError::VersionMismatch { found, expected: version }.into());
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = PREFIX + header_len;
    if bytes.len() < header_end {
        return Err(FormatError::Truncated { needed: header_end, found: bytes.len() }.into());
    }
    let envelope: Envelope<T> =
        serde_json::from_slice(&bytes[PREFIX..header_end]).map_err(|e| FormatError::Header(e.to_string()))?;
    let payload = &bytes[header_end..];
    let expected = usize::try_from(envelope.payload_bytes)
        .map_err(|_| FormatError::Header("payload length overflows".into()))?;
    if payload.len() < expected {
        return Err(FormatError::Truncated { needed: header_end + expected, found: bytes.len() }.into());
    }
    if payload.len() > expected {
        return Err(FormatError::LengthMismatch(format!(
            "header declares {expected} payload bytes, file has {}",
            payload.len()
        ))
        .into());
    }
    if crate::hex(&Sha256::digest(payload)) != envelope.payload_sha256 {
        return Err(FormatError::Checksum.into());
    }
    Ok((envelope.body, payload))
}

fn bad_magic(magic: &[u8; 8]) -> FormatError {
    FormatError::BadMagic { expected: String::from_utf8_lossy(magic).into_owned() }
}

pub(crate) fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sequential little-endian reader over a verified payload.
pub(crate) struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            FormatError::LengthMismatch(format!(
                "payload has {} bytes, header layout needs at least {}",
                self.bytes.len(),
                self.pos.saturating_add(n)
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| FormatError::Header("count overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub(crate) fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Header("count overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::LengthMismatch(format!(
                "{} trailing payload bytes not described by the header",
                self.bytes.len() - self.pos
            ))
            .into());
        }
        Ok(())
    }
}
