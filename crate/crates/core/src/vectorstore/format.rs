//! On-disk index format, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "GGIX"
//! version      u32
//! dim          u32
//! count        u64
//! meta_len     u32, then meta_len bytes of UTF-8 JSON (IndexMetadata)
//! count times:
//!   id_len     u32, then id_len bytes of UTF-8 doc_id
//!   chunk_idx  u32
//!   vector     dim x f32
//! crc32        u32 over every preceding byte
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::{IndexMetadata, VectorIndex};
use crate::corpus::ChunkRef;

pub const MAGIC: &[u8; 4] = b"GGIX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexFormatError {
    #[error("corrupt index: bad magic bytes")]
    BadMagic,
    #[error("corrupt index: unsupported format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt index: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt index: truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt index: invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("index I/O: {0}")]
    Io(#[from] io::Error),
}

impl IndexFormatError {
    /// Name of the field that failed validation.
    pub fn field(&self) -> &'static str {
        match self {
            IndexFormatError::BadMagic => "magic",
            IndexFormatError::UnsupportedVersion(_) => "version",
            IndexFormatError::ChecksumMismatch { .. } => "checksum",
            IndexFormatError::Truncated(f) => f,
            IndexFormatError::Invalid { field, .. } => field,
            IndexFormatError::Io(_) => "io",
        }
    }
}

pub fn encode(index: &VectorIndex) -> Vec<u8> {
    let meta = serde_json::to_vec(&index.metadata).expect("metadata serializes");
    let mut out = Vec::with_capacity(32 + meta.len() + index.data.len() * 4 + index.len() * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (i, r) in index.refs.iter().enumerate() {
        out.extend_from_slice(&(r.doc_id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.doc_id.as_bytes());
        out.extend_from_slice(&r.chunk_index.to_le_bytes());
        for v in index.vector(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], IndexFormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(IndexFormatError::Truncated(field))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, IndexFormatError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, IndexFormatError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Decodes an index, validating magic, version, checksum, dim and count.
/// Never returns a partially read index.
pub fn decode(bytes: &[u8]) -> Result<VectorIndex, IndexFormatError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(IndexFormatError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(IndexFormatError::UnsupportedVersion(version));
    }
    if bytes.len() < 4 + 4 + 4 + 8 + 4 + 4 {
        return Err(IndexFormatError::Truncated("header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(IndexFormatError::ChecksumMismatch { stored, computed });
    }

    let mut cur = Cursor { buf: body, pos: 8 };
    let dim = cur.u32("dim")? as usize;
    if dim == 0 {
        return Err(IndexFormatError::Invalid {
            field: "dim",
            reason: "zero".into(),
        });
    }
    let count = cur.u64("count")?;
    let meta_len = cur.u32("metadata length")? as usize;
    let meta: IndexMetadata =
        serde_json::from_slice(cur.take(meta_len, "metadata")?).map_err(|e| IndexFormatError::Invalid {
            field: "metadata",
            reason: e.to_string(),
        })?;
    // Each entry needs at least 8 + 4*dim bytes; reject absurd counts before allocating.
    let min_entry = 8 + 4 * dim as u64;
    let remaining = (body.len() - cur.pos) as u64;
    if count.saturating_mul(min_entry) > remaining {
        return Err(IndexFormatError::Invalid {
            field: "count",
            reason: format!("{count} entries cannot fit in {remaining} bytes"),
        });
    }
    let count = count as usize;
    let mut refs = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let id_len = cur.u32("doc_id length")? as usize;
        let doc_id = std::str::from_utf8(cur.take(id_len, "doc_id")?)
            .map_err(|e| IndexFormatError::Invalid {
                field: "doc_id",
                reason: e.to_string(),
            })?
            .to_string();
        let chunk_index = cur.u32("chunk_index")?;
        for c in cur.take(4 * dim, "vector")?.chunks_exact(4) {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(IndexFormatError::Invalid {
                    field: "vector",
                    reason: "non-finite component".into(),
                });
            }
            data.push(v);
        }
        refs.push(ChunkRef::new(doc_id, chunk_index));
    }
    if cur.pos != body.len() {
        return Err(IndexFormatError::Invalid {
            field: "count",
            reason: format!("{} trailing bytes after last entry", body.len() - cur.pos),
        });
    }
    Ok(VectorIndex::from_raw(dim, refs, data, meta))
}

/// Writes via a temporary file and rename, so a crash never leaves a
/// half-written index at `path`.
pub fn save_index(index: &VectorIndex, path: &Path) -> Result<(), IndexFormatError> {
    let bytes = encode(index);
    let tmp = path.with_extension("ggix.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<VectorIndex, IndexFormatError> {
    decode(&fs::read(path)?)
}
