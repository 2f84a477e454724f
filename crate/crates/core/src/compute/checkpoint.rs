//! Flat tensor container.
//!
//! Layout: the ASCII line `CRFGEN-CKPT v1\n`, then one record per tensor:
//! name length (u64 LE), UTF-8 name bytes, rank (u64 LE), `rank` extents
//! (u64 LE each), then the entries as f64 LE. Records run to end of file.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::array::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"CRFGEN-CKPT v1\n";

pub fn encode(tensors: &[(&str, &Array)]) -> Vec<u8> {
    let mut out = Vec::from(MAGIC);
    for (name, array) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(array.rank() as u64).to_le_bytes());
        for &extent in array.shape() {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &x in array.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    let body = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint("missing CRFGEN-CKPT v1 header".into()))?;
    let mut cursor = io::Cursor::new(body);
    let mut records = Vec::new();
    while (cursor.position() as usize) < body.len() {
        let name_len = read_u64(&mut cursor)? as usize;
        if name_len > body.len() {
            return Err(Error::Checkpoint("name length exceeds file size".into()));
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut cursor, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u64(&mut cursor)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut cursor)? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .filter(|&l| l.saturating_mul(8) <= body.len())
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} exceeds file size")))?;
        let mut raw = vec![0u8; len * 8];
        read_exact(&mut cursor, &mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let array = Array::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        records.push((name, array));
    }
    Ok(records)
}

pub fn save(path: &Path, tensors: &[(&str, &Array)]) -> Result<()> {
    let bytes = encode(tensors);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Array)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Packs raw bytes into a rank-1 tensor, one byte per entry, so that text
/// blobs can travel inside a checkpoint.
pub fn bytes_to_array(bytes: &[u8]) -> Array {
    if bytes.is_empty() {
        return Array::vector(vec![-1.0]);
    }
    Array::vector(bytes.iter().map(|&b| f64::from(b)).collect())
}

pub fn array_to_bytes(array: &Array) -> Result<Vec<u8>> {
    if array.data() == [-1.0] {
        return Ok(Vec::new());
    }
    array
        .data()
        .iter()
        .map(|&x| {
            if x.fract() == 0.0 && (0.0..=255.0).contains(&x) {
                Ok(x as u8)
            } else {
                Err(Error::Checkpoint(format!("byte blob holds non-byte value {x}")))
            }
        })
        .collect()
}

fn read_u64(cursor: &mut io::Cursor<&[u8]>) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(cursor, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_exact(cursor: &mut io::Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cursor
        .read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated record".into()))
}
