//! EMB1 — the on-disk embedding interchange format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes   "EMB1"
//! rows       u32
//! dim        u32
//! data       rows × dim × f32, row-major
//! trailer_len u64
//! trailer    JSON lines, one object per row: {"id","role","split"}
//! ```
//!
//! Round-trips are bit-exact: the store keeps its raw `f32` rows verbatim
//! and the trailer is regenerated from parsed enums, which serialise back
//! to the same strings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingStore, Role, RowRecord, Split};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Serialize, Deserialize)]
struct RowMeta {
    id: String,
    role: Role,
    split: Split,
}

/// Serialise a store to EMB1 bytes.
pub fn to_bytes(store: &EmbeddingStore) -> Vec<u8> {
    let n = store.len();
    let dim = store.dim();
    let mut trailer = Vec::new();
    for row in 0..n as u32 {
        let meta = RowMeta {
            id: store.id(row).to_owned(),
            role: store.role(row),
            split: store.split(row),
        };
        // Serialising a struct of plain fields cannot fail.
        trailer.extend_from_slice(serde_json::to_string(&meta).unwrap().as_bytes());
        trailer.push(b'\n');
    }

    let mut out = Vec::with_capacity(4 + 8 + n * dim * 4 + 8 + trailer.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in 0..n as u32 {
        for &x in store.raw_row(row) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    out.extend_from_slice(&trailer);
    out
}

/// Parse EMB1 bytes into a store, re-validating norms and id uniqueness.
pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingStore> {
    let fail = |msg: &str| Error::Format(format!("EMB1: {msg}"));

    if bytes.len() < 12 {
        return Err(fail("file shorter than fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(fail("dim is zero"));
    }
    let data_len = n
        .checked_mul(dim)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| fail("row count × dim overflows"))?;
    let trailer_len_at = 12 + data_len;
    if bytes.len() < trailer_len_at + 8 {
        return Err(fail("truncated before trailer length"));
    }
    let trailer_len =
        u64::from_le_bytes(bytes[trailer_len_at..trailer_len_at + 8].try_into().unwrap()) as usize;
    let trailer_at = trailer_len_at + 8;
    if bytes.len() != trailer_at + trailer_len {
        return Err(fail("file length disagrees with declared trailer length"));
    }
    let trailer = std::str::from_utf8(&bytes[trailer_at..])
        .map_err(|_| fail("trailer is not valid UTF-8"))?;

    let metas: Vec<RowMeta> = trailer
        .lines()
        .map(|line| {
            serde_json::from_str(line).map_err(|e| fail(&format!("bad trailer line: {e}")))
        })
        .collect::<Result<_>>()?;
    if metas.len() != n {
        return Err(fail(&format!(
            "trailer has {} rows but header declares {n}",
            metas.len()
        )));
    }

    let records = metas
        .into_iter()
        .enumerate()
        .map(|(row, meta)| {
            let at = 12 + row * dim * 4;
            let vector = bytes[at..at + dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            RowRecord {
                id: meta.id,
                role: meta.role,
                split: meta.split,
                vector,
            }
        })
        .collect();
    EmbeddingStore::from_records(dim, records)
}

/// Write a store to an EMB1 file.
pub fn save_embeddings(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(store))?;
    Ok(())
}

/// Load an EMB1 file into a store.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    from_bytes(&fs::read(path)?)
}
