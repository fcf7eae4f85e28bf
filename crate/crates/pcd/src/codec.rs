//! Binary tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! "PCD1"  u32 version  u32 json_len  json  u32 count
//! count × { u16 path_len  path  u8 dtype  u8 ndim  ndim × u64 dim  f32 data }
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use pcd_core::model::{Checkpoint, CheckpointMeta, Entry, FORMAT_VERSION};
use pcd_core::Tensor;

use crate::error::{io, Error, Result};

pub const MAGIC: [u8; 4] = *b"PCD1";
pub const DTYPE_F32: u8 = 0;

/// Encode JSON metadata and named tensors.
pub fn encode_container(meta_json: &str, entries: &[Entry]) -> Result<Vec<u8>> {
    let payload: usize = entries.iter().map(|e| 2 + e.path.len() + 2 + 8 * e.tensor.rank() + 4 * e.tensor.len()).sum();
    let mut out = Vec::with_capacity(16 + meta_json.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json_len = u32::try_from(meta_json.len()).map_err(|_| Error::Malformed("metadata longer than 4 GiB".into()))?;
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(meta_json.as_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::Malformed("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.path.as_str()) {
            return Err(Error::DuplicatePath(e.path.clone()));
        }
        let plen = u16::try_from(e.path.len()).map_err(|_| Error::Malformed(format!("path `{}` is too long", e.path)))?;
        let ndim = u8::try_from(e.tensor.rank()).map_err(|_| Error::Malformed(format!("`{}` has too many dims", e.path)))?;
        out.extend_from_slice(&plen.to_le_bytes());
        out.extend_from_slice(e.path.as_bytes());
        out.push(DTYPE_F32);
        out.push(ndim);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                what,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decode a container into its metadata JSON and entries. Nothing is returned
/// unless the whole buffer is valid.
pub fn decode_container(bytes: &[u8]) -> Result<(String, Vec<Entry>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let json_len = r.u32("metadata length")? as usize;
    let json = std::str::from_utf8(r.take(json_len, "metadata")?)
        .map_err(|_| Error::Malformed("metadata is not UTF-8".into()))?
        .to_owned();
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let plen = r.u16("path length")? as usize;
        let path = std::str::from_utf8(r.take(plen, "path")?)
            .map_err(|_| Error::Malformed("entry path is not UTF-8".into()))?
            .to_owned();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::BadDtype { path, code: dtype });
        }
        if !seen.insert(path.clone()) {
            return Err(Error::DuplicatePath(path));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = r.u64("dims")?;
            shape.push(usize::try_from(d).map_err(|_| Error::Malformed(format!("`{path}`: dim {d} overflows")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Malformed(format!("`{path}`: shape {shape:?} overflows")))?;
        let raw = r.take(numel, "tensor data")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let tensor = if shape.is_empty() { Tensor::scalar(data[0]) } else { Tensor::new(&shape, data)? };
        entries.push(Entry { path, tensor });
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - r.pos));
    }
    Ok((json, entries))
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let json = serde_json::to_string(&c.meta).map_err(Error::Metadata)?;
    encode_container(&json, &c.entries)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (json, entries) = decode_container(bytes)?;
    let meta: CheckpointMeta = serde_json::from_str(&json).map_err(Error::Metadata)?;
    Ok(Checkpoint::new(meta, entries)?)
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(c)?).map_err(io(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(io(path))?)
}
