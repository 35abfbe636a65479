//! Checkpoint file format.
//!
//! Little-endian binary: magic `CINST1`, u32 tensor count, then per tensor:
//! u32 name length, UTF-8 name, u32 rank, u32 extents, raw f32 data.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CINST1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        file: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let expected: usize = e.shape.iter().product();
        assert_eq!(e.data.len(), expected, "entry '{}' shape/data mismatch", e.name);
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &ext in &e.shape {
            w.write_all(&(ext as u32).to_le_bytes())?;
        }
        for &v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| ck_err(path, "file too short for magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck_err(path, format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        if name_len > 1 << 20 {
            return Err(ck_err(path, format!("entry {i}: absurd name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| ck_err(path, format!("entry {i}: truncated name")))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ck_err(path, format!("entry {i}: name is not UTF-8")))?;
        let rank = read_u32(&mut r, path)? as usize;
        if rank > 8 {
            return Err(ck_err(path, format!("entry '{name}': rank {rank} unsupported")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|_| ck_err(path, format!("entry '{name}': truncated data")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| ck_err(path, "truncated u32 field"))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let entries = vec![
            CheckpointEntry {
                name: "backbone.stem.weight".into(),
                shape: vec![2, 3, 1, 1],
                data: vec![0.1, -0.2, f32::MIN_POSITIVE, 1e30, -0.0, 3.5],
            },
            CheckpointEntry {
                name: "ctrl.bias".into(),
                shape: vec![4],
                data: vec![1.0, 2.0, 3.0, 4.0],
            },
        ];
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in entries.iter().zip(&loaded) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(
                a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTCKPT000").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_file_names_reason() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let entries = vec![CheckpointEntry {
            name: "w".into(),
            shape: vec![8],
            data: vec![0.5; 8],
        }];
        save_checkpoint(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
