//! `TNSR` tensor dumps and multi-tensor checkpoint packs.
//!
//! A single record is the 8-byte magic `TNSR\0\0\0\x01`, a little-endian `u32`
//! rank, `rank` little-endian `u64` extents, then the row-major `f64` payload
//! (little-endian).
//!
//! A pack is the magic `TNSRPACK`, a little-endian `u64` header length, a JSON
//! header `{"meta": …, "tensors": [{"name", "offset", "len"}]}`, then the
//! concatenated records. Offsets are relative to the first byte after the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"TNSR\0\0\0\x01";
pub const PACK_MAGIC: [u8; 8] = *b"TNSRPACK";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::format("TNSR", format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Decodes one record from the front of `bytes`, advancing past it.
pub fn decode_from(bytes: &mut &[u8]) -> Result<Tensor> {
    if take(bytes, 8, "magic")? != MAGIC {
        return Err(Error::format("TNSR", "bad magic"));
    }
    let rank = u32::from_le_bytes(take(bytes, 4, "rank")?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, 8, "extent")?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::format("TNSR", "extent overflow"))?);
    }
    let n: usize = shape.iter().product();
    let payload = take(
        bytes,
        n.checked_mul(8).ok_or_else(|| Error::format("TNSR", "size overflow"))?,
        "payload",
    )?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let t = decode_from(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(Error::format("TNSR", "trailing bytes after record"));
    }
    Ok(t)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t)).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackEntry {
    pub name: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PackHeader {
    meta: serde_json::Value,
    tensors: Vec<PackEntry>,
}

pub fn write_pack(mut w: impl Write, meta: serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let blobs: Vec<Vec<u8>> = tensors.iter().map(|(_, t)| encode(t)).collect();
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .zip(&blobs)
        .map(|((name, _), b)| {
            let e = PackEntry {
                name: name.to_string(),
                offset,
                len: b.len() as u64,
            };
            offset += b.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&PackHeader { meta, tensors: entries })?;
    w.write_all(&PACK_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for b in &blobs {
        w.write_all(b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pack(mut r: impl Read) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    if take(&mut cur, 8, "pack magic")? != PACK_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let hlen = u64::from_le_bytes(take(&mut cur, 8, "header length")?.try_into().unwrap());
    let hlen = usize::try_from(hlen).map_err(|_| Error::format("checkpoint", "header too large"))?;
    let header: PackHeader = serde_json::from_slice(take(&mut cur, hlen, "header")?)?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let start = usize::try_from(e.offset).unwrap_or(usize::MAX);
        let end = start.saturating_add(usize::try_from(e.len).unwrap_or(usize::MAX));
        let blob = cur
            .get(start..end)
            .ok_or_else(|| Error::format("checkpoint", format!("tensor {} out of range", e.name)))?;
        out.push((e.name, decode(blob)?));
    }
    Ok((header.meta, out))
}

pub fn save_pack(path: impl AsRef<Path>, meta: serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    write_pack(BufWriter::new(f), meta, tensors)
}

pub fn load_pack(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    read_pack(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], b"TNSR\0\0\0\x01");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..20], &2u64.to_le_bytes());
        assert_eq!(&b[20..28], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 36);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOTATENSOR").is_err());
        let mut b = encode(&Tensor::zeros(&[3]));
        b.pop();
        assert!(decode(&b).is_err());
    }

    #[test]
    fn pack_round_trip() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5);
        let b = Tensor::scalar(7.0);
        let mut buf = Vec::new();
        write_pack(&mut buf, serde_json::json!({"k": 1}), &[("a", &a), ("b", &b)]).unwrap();
        let (meta, ts) = read_pack(buf.as_slice()).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(ts, vec![("a".to_string(), a), ("b".to_string(), b)]);
    }
}
