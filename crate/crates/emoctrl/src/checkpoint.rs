//! Single-file checkpoint container.
//!
//! Layout: an 8-byte magic, a `u32` format version, a length-prefixed JSON
//! header (kind, caller metadata, tensor directory), then all tensor data
//! as row-major little-endian `f32`. The header carries enough to rebuild
//! each tensor without guessing shapes, and `meta` echoes whatever
//! configuration produced the file so stale checkpoints are detectable.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 8] = b"EMOCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: u64,
}

/// A loaded checkpoint: a kind tag, caller metadata, and named tensors.
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }
}

/// Write `tensors` to `path` in declaration order.
pub fn save(
    path: &Path,
    kind: &str,
    meta: &serde_json::Value,
    tensors: &[(&str, &ArrayD<f32>)],
) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(Entry {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() as u64;
    }
    let header = Header {
        kind: kind.to_string(),
        meta: meta.clone(),
        entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in tensors {
        let t = t.as_standard_layout();
        for &v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(CheckpointError::Format("payload not a whole number of f32".into()));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut tensors = BTreeMap::new();
    for e in &header.entries {
        let len: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start
            .checked_add(len)
            .ok_or_else(|| CheckpointError::Format("tensor offset overflow".into()))?;
        if end > floats.len() {
            return Err(CheckpointError::Format(format!(
                "tensor {:?} extends past payload",
                e.name
            )));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), floats[start..end].to_vec())
            .map_err(|_| CheckpointError::Format(format!("tensor {:?} shape mismatch", e.name)))?;
        if tensors.insert(e.name.clone(), arr).is_some() {
            return Err(CheckpointError::Format(format!("duplicate tensor {:?}", e.name)));
        }
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn round_trip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0f32, -2.5, 3.0, 0.0, 5.5, -6.25]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let meta = serde_json::json!({"seed": 7, "d_model": 64});
        save(&path, "text_model", &meta, &[("emb", &a), ("bias", &b)]).unwrap();

        let ck = load(&path).unwrap();
        assert_eq!(ck.kind, "text_model");
        assert_eq!(ck.meta["seed"], 7);
        assert_eq!(ck.tensor("emb").unwrap(), &a);
        assert_eq!(ck.tensor("bias").unwrap(), &b);
        assert!(matches!(
            ck.tensor("nope"),
            Err(CheckpointError::MissingTensor(_))
        ));
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT0000000000000000").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn identical_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let t = ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let meta = serde_json::json!({"k": "v"});
        save(&p1, "probe", &meta, &[("w", &t)]).unwrap();
        save(&p2, "probe", &meta, &[("w", &t)]).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
