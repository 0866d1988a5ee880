//! Binary model container shared by expert and gating files.
//!
//! Layout (little-endian): 4-byte magic, `u32` format version, `u32` metadata
//! length, UTF-8 JSON metadata, `u32` parameter count, then per parameter a
//! `u32` name length, the name, `u32` rank, `u32` dims and `f32` data. A CRC32
//! of every preceding byte closes the file.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const EXPERT_MAGIC: [u8; 4] = *b"GFEX";
pub const GATING_MAGIC: [u8; 4] = *b"GFGT";

pub fn encode<M: Serialize>(magic: [u8; 4], version: u32, metadata: &M, params: &[&Parameter]) -> Vec<u8> {
    let meta = serde_json::to_vec(metadata).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    put_u32(&mut out, version);
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(&meta);
    put_u32(&mut out, params.len() as u32);
    for p in params {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.ndim() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

/// Checks magic, then version, then checksum, and only then parses the body.
pub fn decode<M: DeserializeOwned>(path: &Path, magic: [u8; 4], bytes: &[u8]) -> Result<(M, Vec<Parameter>)> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!("expected magic {:?}", String::from_utf8_lossy(&magic)),
        ));
    }
    if bytes.len() < 12 {
        return Err(Error::Checksum {
            path: path.into(),
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible {
            path: path.into(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }

    let mut r = Reader { path, buf: body, pos: 8 };
    let meta_len = r.u32()? as usize;
    let meta: M = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::format(path, format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Parameter::new(name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    Ok((meta, params))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Copies stored values into `params`, requiring the same names and shapes in
/// the same order.
pub fn assign(path: &Path, stored: Vec<Parameter>, params: &mut [&mut Parameter]) -> Result<()> {
    if stored.len() != params.len() {
        return Err(Error::format(
            path,
            format!("{} parameters stored, architecture has {}", stored.len(), params.len()),
        ));
    }
    for (s, p) in stored.into_iter().zip(params.iter_mut()) {
        if s.name != p.name || s.value.shape() != p.value.shape() {
            return Err(Error::format(
                path,
                format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    s.name,
                    s.value.shape(),
                    p.name,
                    p.value.shape()
                ),
            ));
        }
        p.value = s.value;
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, "unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
