//! `MSARR1` tensor containers and SHA-256 checksums.
//!
//! A container is one ASCII header line `MSARR1 f64 <ndim> <dims...>\n`
//! followed by the row-major little-endian `f64` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &str = "MSARR1";
const DTYPE: &str = "f64";

pub fn encode(array: &ArrayD<f64>) -> Vec<u8> {
    let dims: Vec<String> = array.shape().iter().map(|d| d.to_string()).collect();
    let mut header = format!("{MAGIC} {DTYPE} {}", array.ndim());
    for d in &dims {
        header.push(' ');
        header.push_str(d);
    }
    header.push('\n');
    let mut out = Vec::with_capacity(header.len() + array.len() * 8);
    out.extend_from_slice(header.as_bytes());
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ArrayD<f64>> {
    let bad = |reason: &str| Error::Container {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII"))?;
    let mut tokens = header.split(' ');
    if tokens.next() != Some(MAGIC) {
        return Err(bad("bad magic"));
    }
    if tokens.next() != Some(DTYPE) {
        return Err(bad("unsupported dtype"));
    }
    let ndim: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad ndim"))?;
    let dims: Vec<usize> = tokens
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("bad dimension"))?;
    if dims.len() != ndim {
        return Err(bad("ndim does not match dimension count"));
    }
    let n: usize = dims.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != n * 8 {
        return Err(bad("payload length does not match dimensions"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|_| bad("shape error"))
}

/// Writes the container and returns the SHA-256 of the bytes written.
pub fn write(path: &Path, array: &ArrayD<f64>) -> Result<String> {
    let bytes = encode(array);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Checksum of a flat sequence of floats, independent of container layout.
pub fn values_sha256<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
