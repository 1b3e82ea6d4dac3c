//! Little-endian binary container shared by `.vfeat` and `.tfeat` files.
//!
//! Layout: 4 magic bytes, `u32` rows, `u32` dim, `u32` dtype tag (1 = f32),
//! `rows * dim` f32 values row-major, then a `u32` length-prefixed UTF-8 JSON
//! trailer.

use crate::error::{Error, Result};

pub(crate) const DTYPE_F32: u32 = 1;

pub(crate) struct RawContainer {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub trailer: Vec<u8>,
}

pub(crate) fn encode(magic: &[u8; 4], rows: usize, dim: usize, data: &[f32], trailer: &[u8]) -> Vec<u8> {
    debug_assert_eq!(data.len(), rows * dim);
    let mut out = Vec::with_capacity(20 + data.len() * 4 + trailer.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
    out.extend_from_slice(trailer);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "expected {n} bytes of {what} at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub(crate) fn decode(magic: &[u8; 4], bytes: &[u8], empty_message: &str) -> Result<RawContainer> {
    let mut r = Reader { bytes, pos: 0 };
    let found = r
        .take(4, "magic")
        .map_err(|_| Error::Format("file too short for container magic".into()))?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let rows = r.u32("row count")? as usize;
    let dim = r.u32("dimension")? as usize;
    let dtype = r.u32("dtype tag")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    if rows == 0 {
        return Err(Error::Data(empty_message.to_string()));
    }
    if dim == 0 {
        return Err(Error::Data("zero embedding dimension".into()));
    }
    let count = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::Format(format!("dimensions {rows}x{dim} overflow")))?;
    let payload = r.take(count * 4, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let trailer_len = r.u32("trailer length")? as usize;
    let trailer = r.take(trailer_len, "trailer")?.to_vec();
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after trailer",
            bytes.len() - r.pos
        )));
    }
    Ok(RawContainer {
        rows,
        dim,
        data,
        trailer,
    })
}
