//! Parameter checkpoint container shared by fusion adapters and expert heads.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ILRC" | u32 header_len | header_len bytes of JSON | n × f32 parameters
//! ```
//!
//! The JSON header carries a `kind` tag, the shapes needed to slice the
//! blob, and `n_params`. Parameters are stored in 32-bit precision.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"ILRC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<H> {
    pub kind: String,
    pub n_params: usize,
    #[serde(flatten)]
    pub header: H,
}

pub fn encode<H: Serialize>(kind: &str, header: &H, params: &[f64]) -> Result<Vec<u8>> {
    let env = Envelope {
        kind: kind.to_string(),
        n_params: params.len(),
        header,
    };
    let json = serde_json::to_vec(&env)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(
    bytes: &[u8],
    expected_kind: &str,
    location: &str,
) -> Result<(H, Vec<f64>)> {
    let malformed = |message: String| Error::Malformed {
        location: location.to_string(),
        message,
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(malformed("missing ILRC checkpoint magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| malformed(format!("header length {header_len} exceeds file size")))?;
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| malformed(format!("bad header: {e}")))?;
    let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if kind != expected_kind {
        return Err(malformed(format!(
            "checkpoint kind {kind:?}, expected {expected_kind:?}"
        )));
    }
    let env: Envelope<H> =
        serde_json::from_value(value).map_err(|e| malformed(format!("bad header: {e}")))?;
    let blob = &bytes[8 + header_len..];
    if blob.len() != 4 * env.n_params {
        return Err(malformed(format!(
            "expected {} parameter bytes, found {}",
            4 * env.n_params,
            blob.len()
        )));
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((env.header, params))
}

pub fn save<H: Serialize>(path: &Path, kind: &str, header: &H, params: &[f64]) -> Result<()> {
    write_atomic(path, &encode(kind, header, params)?)
}

pub fn load<H: DeserializeOwned>(path: &Path, expected_kind: &str) -> Result<(H, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected_kind, &path.display().to_string())
}
