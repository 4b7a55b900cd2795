//! DTF: the raw tensor container used for weights, samples, and test
//! fixtures.
//!
//! Layout, byte for byte:
//!
//! ```text
//! 8 bytes   magic "DABDUTF1"
//! 4 bytes   u32 little-endian header length
//! N bytes   UTF-8 JSON header
//! ...       payload: f64 little-endian values, row-major
//! ```
//!
//! A single-tensor file carries the header `{"shape":[...],"dtype":"f64"}`.
//! A container (used for weight files) carries
//! `{"dtype":"f64","entries":[{"name":...,"shape":[...]}, ...]}` and the
//! payloads of all entries concatenated in entry order. Trailing bytes and
//! truncation are both structured errors carrying the byte offset.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DABDUTF1";

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    dtype: String,
    entries: Vec<EntryHeader>,
}

#[derive(Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

fn encode(header_json: &str, payloads: &[&[f64]]) -> Vec<u8> {
    let header = header_json.as_bytes();
    let total: usize = payloads.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(12 + header.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for payload in payloads {
        for v in *payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(bytes)?;
    Ok(())
}

/// Serializes one tensor to a DTF file.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let header = serde_json::to_string(&TensorHeader {
        shape: t.shape().to_vec(),
        dtype: "f64".to_string(),
    })?;
    write_atomically(path.as_ref(), &encode(&header, &[t.data()]))
}

/// Serializes named tensors to a DTF container, preserving order.
pub fn write_container(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let header = serde_json::to_string(&ContainerHeader {
        dtype: "f64".to_string(),
        entries: entries
            .iter()
            .map(|(name, t)| EntryHeader { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    })?;
    let payloads: Vec<&[f64]> = entries.iter().map(|(_, t)| t.data()).collect();
    write_atomically(path.as_ref(), &encode(&header, &payloads))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

fn parse_header<'a>(cursor: &mut Cursor<'a>) -> Result<&'a str> {
    let magic = cursor.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}, want {MAGIC:?}") });
    }
    let len_bytes = cursor.take(4, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let header_start = cursor.pos as u64;
    let header = cursor.take(header_len, "JSON header")?;
    std::str::from_utf8(header)
        .map_err(|e| Error::Format { offset: header_start + e.valid_up_to() as u64, msg: "header is not UTF-8".into() })
}

fn parse_payload(cursor: &mut Cursor<'_>, numel: usize, what: &str) -> Result<Vec<f64>> {
    let raw = cursor.take(8 * numel, what)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn finish(cursor: &Cursor<'_>) -> Result<()> {
    if cursor.pos != cursor.bytes.len() {
        return Err(Error::Format {
            offset: cursor.pos as u64,
            msg: format!("{} trailing bytes after payload", cursor.bytes.len() - cursor.pos),
        });
    }
    Ok(())
}

fn check_dtype(dtype: &str, offset: u64) -> Result<()> {
    if dtype != "f64" {
        return Err(Error::Format { offset, msg: format!("unsupported dtype {dtype:?}") });
    }
    Ok(())
}

/// Reads a single-tensor DTF file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref())?;
    let mut cursor = Cursor { bytes: &bytes, pos: 0 };
    let header_str = parse_header(&mut cursor)?;
    let header: TensorHeader = serde_json::from_str(header_str)
        .map_err(|e| Error::Format { offset: 12, msg: format!("header JSON: {e}") })?;
    check_dtype(&header.dtype, 12)?;
    let numel: usize = header.shape.iter().product();
    let data = parse_payload(&mut cursor, numel, "tensor payload")?;
    finish(&cursor)?;
    Tensor::from_vec(data, &header.shape)
}

/// Reads a DTF container, preserving entry order.
pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path.as_ref())?;
    let mut cursor = Cursor { bytes: &bytes, pos: 0 };
    let header_str = parse_header(&mut cursor)?;
    let header: ContainerHeader = serde_json::from_str(header_str)
        .map_err(|e| Error::Format { offset: 12, msg: format!("header JSON: {e}") })?;
    check_dtype(&header.dtype, 12)?;
    let mut out = Vec::with_capacity(header.entries.len());
    for entry in &header.entries {
        let numel: usize = entry.shape.iter().product();
        let data = parse_payload(&mut cursor, numel, &format!("payload of `{}`", entry.name))?;
        out.push((entry.name.clone(), Tensor::from_vec(data, &entry.shape)?));
    }
    finish(&cursor)?;
    Ok(out)
}
