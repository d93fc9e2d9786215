//! Shared binary container used by the `.acstore`, `.acadapter` and
//! `.acmodel` files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4] | version u8 | manifest_len u32 | manifest (JSON) | blob_len u64 | blob | crc32(blob) u32
//! ```
//!
//! The manifest repeats the format version and the blob checksum so the
//! metadata is self-describing when extracted on its own.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) struct Container<M> {
    pub manifest: M,
    pub blob: Vec<u8>,
}

pub(crate) fn encode<M: Serialize>(magic: [u8; 4], version: u8, manifest: &M, blob: &[u8]) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec_pretty(manifest)?;
    let mut out = Vec::with_capacity(4 + 1 + 4 + manifest.len() + 8 + blob.len() + 4);
    out.extend_from_slice(&magic);
    out.push(version);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
    out.extend_from_slice(&crc32fast::hash(blob).to_le_bytes());
    Ok(out)
}

pub(crate) fn decode<M: DeserializeOwned>(magic: [u8; 4], version: u8, bytes: &[u8]) -> Result<Container<M>> {
    let mut cursor = Cursor { bytes, pos: 0 };
    if cursor.take(4)? != magic {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let found = cursor.take(1)?[0];
    if found != version {
        return Err(Error::FormatVersionMismatch { expected: version, found });
    }
    let manifest_len = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap()) as usize;
    let manifest_bytes = cursor.take(manifest_len)?;
    let blob_len = u64::from_le_bytes(cursor.take(8)?.try_into().unwrap());
    let blob_len = usize::try_from(blob_len).map_err(|_| Error::CorruptFile("blob length overflow".into()))?;
    let blob = cursor.take(blob_len)?;
    let crc = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
    if cursor.pos != bytes.len() {
        return Err(Error::CorruptFile("trailing bytes after checksum".into()));
    }
    if crc32fast::hash(blob) != crc {
        return Err(Error::CorruptFile("blob checksum mismatch".into()));
    }
    let manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::CorruptFile(format!("manifest: {e}")))?;
    Ok(Container {
        manifest,
        blob: blob.to_vec(),
    })
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub(crate) fn write_file<M: Serialize>(path: &Path, magic: [u8; 4], version: u8, manifest: &M, blob: &[u8]) -> Result<()> {
    let bytes = encode(magic, version, manifest, blob)?;
    // write-then-rename so readers never observe a half-written file
    ensure_parent(path)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file<M: DeserializeOwned>(path: &Path, magic: [u8; 4], version: u8) -> Result<Container<M>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, version, &bytes)
}

pub(crate) fn crc32(blob: &[u8]) -> u32 {
    crc32fast::hash(blob)
}

pub(crate) fn push_f32s(blob: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Sequential reader over a little-endian f32 blob.
pub(crate) struct F32Reader<'a> {
    cursor: Cursor<'a>,
}

impl<'a> F32Reader<'a> {
    pub fn new(blob: &'a [u8]) -> Self {
        Self {
            cursor: Cursor { bytes: blob, pos: 0 },
        }
    }

    pub fn read(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.cursor.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.cursor.pos == self.cursor.bytes.len() {
            Ok(())
        } else {
            Err(Error::CorruptFile("blob longer than manifest describes".into()))
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}
