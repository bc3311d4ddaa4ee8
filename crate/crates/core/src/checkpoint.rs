//! Flat binary checkpoint archive.
//!
//! Layout: the 8-byte magic `FSENETCK`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor as little-endian `f32` values at the
//! byte offset (relative to the end of the manifest) listed in the manifest.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::FsenetConfig;
use crate::error::{Error, Result};
use crate::model::Fsenet;
use crate::nn::to_f32_grid;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSENETCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

/// Training progress stored next to the tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of optimizer steps already taken.
    pub step: u64,
    pub epoch: u64,
    /// Lowest validation RMSE seen so far.
    pub best_val_rmse: Option<f64>,
    pub last_val_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: FsenetConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: FsenetConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Model parameters only.
    pub fn from_model(net: &Fsenet, meta: CheckpointMeta) -> Self {
        Checkpoint {
            config: net.config.clone(),
            meta,
            tensors: net.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if let Some(v) = t.data().iter().find(|v| to_f32_grid(**v) != **v) {
                return Err(corrupt(format!("tensor {name} holds {v}, which is not an f32 value")));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let manifest = Manifest {
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| corrupt(format!("manifest: {e}")))?;
        let blobs = &bytes[16 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(corrupt(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(corrupt(format!("tensor {} has offset {} (expected {expected})", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = blobs
                .get(start..start + 4 * n)
                .ok_or_else(|| corrupt(format!("tensor {} is truncated", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)));
            expected += 4 * n as u64;
        }
        if blobs.len() as u64 != expected {
            return Err(corrupt(format!(
                "{} trailing bytes after the last tensor",
                blobs.len() as u64 - expected
            )));
        }
        Ok(Checkpoint {
            config: manifest.config,
            meta: manifest.meta,
            tensors,
        })
    }

    /// Write through a temporary file and rename, so readers never see a
    /// partial archive.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copy the stored parameters into `net`. Fails on the first parameter that
    /// is missing or has a different shape.
    pub fn apply_to(&self, net: &mut Fsenet) -> Result<()> {
        let ids: Vec<_> = net.params.ids().collect();
        for id in ids {
            let name = net.params.name(id).to_string();
            let want = net.params.get(id).shape().to_vec();
            let stored = self
                .get(&name)
                .ok_or_else(|| corrupt(format!("tensor {name} missing from checkpoint")))?;
            if stored.shape() != want.as_slice() {
                return Err(corrupt(format!(
                    "tensor {name} has shape {:?}, model expects {want:?}",
                    stored.shape()
                )));
            }
            net.params.assign(id, stored.data())?;
        }
        Ok(())
    }

    /// Rebuild the network described by the stored config.
    pub fn to_model(&self) -> Result<Fsenet> {
        let mut net = Fsenet::new(self.config.clone())?;
        self.apply_to(&mut net)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Fsenet {
        let mut cfg = FsenetConfig::toy();
        cfg.seed = 3;
        Fsenet::new(cfg).unwrap()
    }

    #[test]
    fn byte_exact_round_trip() {
        let net = toy();
        let meta = CheckpointMeta {
            step: 17,
            epoch: 2,
            best_val_rmse: Some(12.5),
            last_val_rmse: Some(13.0),
        };
        let ck = Checkpoint::from_model(&net, meta);
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
        let model = back.to_model().unwrap();
        for ((a, x), (b, y)) in model.params.iter().zip(net.params.iter()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn file_round_trip_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_model(&toy(), CheckpointMeta::default());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let ck = Checkpoint::from_model(&toy(), CheckpointMeta::default());
        let mut cfg = FsenetConfig::toy();
        cfg.base_channels = 16;
        let mut other = Fsenet::new(cfg).unwrap();
        let err = ck.apply_to(&mut other).unwrap_err().to_string();
        let first = other.params.iter().next().unwrap().0.to_string();
        assert!(err.contains(&first), "{err}");
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::from_model(&toy(), CheckpointMeta::default()).encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn refuses_values_off_the_f32_grid() {
        let ck = Checkpoint {
            config: FsenetConfig::toy(),
            meta: CheckpointMeta::default(),
            tensors: vec![("x".into(), Tensor::new(&[1], vec![0.1]))],
        };
        assert!(ck.encode().is_err());
    }
}
