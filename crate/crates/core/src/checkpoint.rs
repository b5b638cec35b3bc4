//! Binary checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header (architecture, training config, task, progress and a
//! tensor table), then every tensor as little-endian `f32` in table order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{IlluminationSetting, Task};
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::network::{ArchConfig, ModelParams};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DSRNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Task a model was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task: Task,
    pub target: IlluminationSetting,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub config: TrainConfig,
    pub task: Option<TaskInfo>,
    pub stage: u8,
    pub step: usize,
    pub best_val_psnr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    config: TrainConfig,
    task: Option<TaskInfo>,
    stage: u8,
    step: usize,
    best_val_psnr: Option<f64>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let store = ckpt.params.store();
    let header = Header {
        arch: ckpt.params.arch().clone(),
        config: ckpt.config.clone(),
        task: ckpt.task,
        stage: ckpt.stage,
        step: ckpt.step,
        best_val_psnr: ckpt.best_val_psnr,
        tensors: store.iter().map(|p| TensorEntry { name: p.name.clone(), dims: p.dims.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + store.scalar_count() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in store.iter() {
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::CorruptArchive(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Loads a checkpoint and requires it to hold the given architecture.
pub fn load_checkpoint_for(path: &Path, arch: &ArchConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.params.arch() != arch {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match requested {:?}",
            ckpt.params.arch(),
            arch
        )));
    }
    Ok(ckpt)
}

fn decode(mut bytes: &[u8]) -> Result<Checkpoint> {
    let b = &mut bytes;
    if take(b, 8, "magic")? != MAGIC {
        return Err(Error::CorruptArchive("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let hlen = u64::from_le_bytes(take(b, 8, "header length")?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| Error::CorruptArchive("header length overflow".into()))?;
    let header: Header = serde_json::from_slice(take(b, hlen, "header")?)
        .map_err(|e| Error::CorruptArchive(format!("unreadable header: {e}")))?;
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n: usize = t.dims.iter().product();
        let raw = take(b, n * 4, &t.name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.push(t.name.clone(), t.dims.clone(), data);
    }
    if !b.is_empty() {
        return Err(Error::CorruptArchive(format!("{} trailing bytes", b.len())));
    }
    Ok(Checkpoint {
        params: ModelParams::from_store(header.arch, store)?,
        config: header.config,
        task: header.task,
        stage: header.stage,
        step: header.step,
        best_val_psnr: header.best_val_psnr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Direction;
    use crate::imaging::ImageTensor;
    use crate::network::dsrn_forward_raw;

    fn sample() -> Checkpoint {
        let arch = ArchConfig::default().with_base_channels(4);
        let target = IlluminationSetting::new(Direction::E, 4500).unwrap();
        Checkpoint {
            params: ModelParams::init(arch.clone(), 9).unwrap(),
            config: TrainConfig { arch, ..TrainConfig::default() },
            task: Some(TaskInfo { task: Task::multi(Direction::N, 6500), target }),
            stage: 2,
            step: 17,
            best_val_psnr: Some(21.5),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let x = ImageTensor::filled(16, 16, [0.3, 0.5, 0.7]).unwrap();
        let a = dsrn_forward_raw(&ckpt.params, x.tensor()).unwrap();
        let b = dsrn_forward_raw(&back.params, x.tensor()).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn truncated_and_garbage_files_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 15, 40, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::CorruptArchive(_))), "cut at {cut}");
        }
        std::fs::write(&path, b"hello world, not a model").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptArchive(_))));
    }

    #[test]
    fn version_and_arch_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let bumped = dir.path().join("v7.ckpt");
        std::fs::write(&bumped, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bumped), Err(Error::VersionMismatch { found: 7, expected: 1 })));
        let other = ArchConfig::default().with_base_channels(8);
        assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::Config(_))));
        assert!(load_checkpoint_for(&path, &ArchConfig::default().with_base_channels(4)).is_ok());
    }
}
