//! Single-file checkpoint container: a JSON metadata record followed by the
//! raw little-endian f64 payload of every named array.
//!
//! Layout:
//! ```text
//! bytes 0..8    magic "DETCOCKP"
//! bytes 8..16   u64 LE: metadata length in bytes
//! ...           metadata JSON (step, config snapshot, queue cursors,
//!               array directory with shapes and element offsets)
//! ...           payload: f64 LE values, arrays in directory order
//! ```
//! Arrays are namespaced `q/...` (query params), `k/...` (key params),
//! `opt/...` (optimizer velocities) and `queue/<name>` (bank storage).

use crate::error::{DetcoError, Result};
use crate::memory::{FeatureQueue, QueueBank};
use crate::model::ParameterSet;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DETCOCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueueEntry {
    name: String,
    ptr: usize,
    filled: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    step: u64,
    config: serde_json::Value,
    queues: Vec<QueueEntry>,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to resume training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Effective experiment config snapshot (JSON form).
    pub config: serde_json::Value,
    pub query_params: ParameterSet,
    pub key_params: ParameterSet,
    pub optimizer: ParameterSet,
    pub bank: QueueBank,
}

fn queue_names() -> Vec<String> {
    let mut names = Vec::with_capacity(8);
    for i in 0..4 {
        names.push(format!("global{}", i + 2));
    }
    for i in 0..4 {
        names.push(format!("local{}", i + 2));
    }
    names
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (prefix, set) in [
            ("q", &self.query_params),
            ("k", &self.key_params),
            ("opt", &self.optimizer),
        ] {
            for (name, arr) in set.iter() {
                arrays.push((
                    format!("{prefix}/{name}"),
                    arr.shape().to_vec(),
                    arr.iter().copied().collect(),
                ));
            }
        }
        let mut queues = Vec::new();
        for (name, q) in queue_names()
            .into_iter()
            .zip(self.bank.global.iter().chain(self.bank.local.iter()))
        {
            queues.push(QueueEntry {
                name: name.clone(),
                ptr: q.ptr(),
                filled: q.filled(),
            });
            arrays.push((
                format!("queue/{name}"),
                vec![q.capacity(), q.dim()],
                q.storage().iter().copied().collect(),
            ));
        }

        let mut entries = Vec::with_capacity(arrays.len());
        let mut offset = 0u64;
        for (name, shape, data) in &arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len() as u64,
            });
            offset += data.len() as u64;
        }
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            queues,
            arrays: entries,
        };
        let meta_bytes = serde_json::to_vec(&meta)
            .map_err(|e| DetcoError::Checkpoint(format!("metadata encode failed: {e}")))?;

        let file = File::create(path).map_err(|e| DetcoError::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| DetcoError::io(path.display().to_string(), e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&(meta_bytes.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&meta_bytes).map_err(io_err)?;
        for (_, _, data) in &arrays {
            for v in data {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| DetcoError::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let io_err = |e: std::io::Error| DetcoError::io(path.display().to_string(), e);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(DetcoError::Checkpoint(format!(
                "{} is not a checkpoint container (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes).map_err(io_err)?;
        let meta_len = u64::from_le_bytes(len_bytes) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes).map_err(io_err)?;
        let meta: Metadata = serde_json::from_slice(&meta_bytes)
            .map_err(|e| DetcoError::Checkpoint(format!("metadata decode failed: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(DetcoError::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                meta.format_version
            )));
        }

        let total: u64 = meta.arrays.iter().map(|a| a.len).sum();
        let mut payload = vec![0u8; (total * 8) as usize];
        r.read_exact(&mut payload).map_err(io_err)?;

        let mut query_params = ParameterSet::new();
        let mut key_params = ParameterSet::new();
        let mut optimizer = ParameterSet::new();
        let mut queue_storage: Vec<(String, Array2<f64>)> = Vec::new();
        for entry in &meta.arrays {
            let expect: usize = entry.shape.iter().product();
            if expect as u64 != entry.len {
                return Err(DetcoError::Checkpoint(format!(
                    "array {} shape {:?} disagrees with payload length {}",
                    entry.name, entry.shape, entry.len
                )));
            }
            let start = (entry.offset * 8) as usize;
            let end = start + (entry.len * 8) as usize;
            if end > payload.len() {
                return Err(DetcoError::Checkpoint(format!(
                    "array {} escapes the payload",
                    entry.name
                )));
            }
            let values: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| DetcoError::Checkpoint(format!("array {}: {e}", entry.name)))?;
            match entry.name.split_once('/') {
                Some(("q", rest)) => query_params.insert(rest, arr),
                Some(("k", rest)) => key_params.insert(rest, arr),
                Some(("opt", rest)) => optimizer.insert(rest, arr),
                Some(("queue", rest)) => {
                    let storage = arr
                        .into_dimensionality::<ndarray::Ix2>()
                        .map_err(|e| DetcoError::Checkpoint(format!("queue {rest}: {e}")))?;
                    queue_storage.push((rest.to_string(), storage));
                }
                _ => {
                    return Err(DetcoError::Checkpoint(format!(
                        "unknown array namespace in {}",
                        entry.name
                    )))
                }
            }
        }

        let expected = queue_names();
        if queue_storage.len() != expected.len() || meta.queues.len() != expected.len() {
            return Err(DetcoError::Checkpoint(format!(
                "expected {} queues, found {} storages and {} cursor records",
                expected.len(),
                queue_storage.len(),
                meta.queues.len()
            )));
        }
        let mut global = Vec::with_capacity(4);
        let mut local = Vec::with_capacity(4);
        for name in &expected {
            let (_, storage) = queue_storage
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| DetcoError::Checkpoint(format!("missing queue storage {name}")))?;
            let cursor = meta
                .queues
                .iter()
                .find(|qe| &qe.name == name)
                .ok_or_else(|| DetcoError::Checkpoint(format!("missing queue cursor {name}")))?;
            let q = FeatureQueue::from_parts(storage.clone(), cursor.ptr, cursor.filled)?;
            if name.starts_with("global") {
                global.push(q);
            } else {
                local.push(q);
            }
        }

        Ok(Checkpoint {
            step: meta.step,
            config: meta.config,
            query_params,
            key_params,
            optimizer,
            bank: QueueBank { global, local },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn sample_checkpoint() -> Checkpoint {
        let mut qp = ParameterSet::new();
        qp.insert("enc.w", ArrayD::from_elem(IxDyn(&[2, 3]), 1.5));
        qp.insert("enc.b", ArrayD::from_elem(IxDyn(&[3]), -0.25));
        let mut kp = ParameterSet::new();
        kp.insert("enc.w", ArrayD::from_elem(IxDyn(&[2, 3]), 1.0));
        kp.insert("enc.b", ArrayD::from_elem(IxDyn(&[3]), 0.0));
        let mut opt = ParameterSet::new();
        opt.insert("enc.w", ArrayD::zeros(IxDyn(&[2, 3])));
        opt.insert("enc.b", ArrayD::zeros(IxDyn(&[3])));
        Checkpoint {
            step: 42,
            config: serde_json::json!({"trainer": {"seed": 7}}),
            query_params: qp,
            key_params: kp,
            optimizer: opt,
            bank: QueueBank::warm_start(8, 4, 3).unwrap(),
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.detco");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.detco");
        let b = dir.path().join("b.detco");
        let ckpt = sample_checkpoint();
        ckpt.save(&a).unwrap();
        ckpt.save(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.detco");
        std::fs::write(&path, b"NOTADETC0000000000").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(DetcoError::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.detco");
        sample_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
