//! Model checkpoints: a binary tensor file, a JSON sidecar with the
//! network configuration and progress, and an optional optimizer file.
//!
//! Tensor file layout, little-endian: magic `CVCK`, `u32` version, `u32`
//! entry count, then per entry `u32` name length, UTF-8 name, `u8` rank,
//! `u32` dims and the `f32` values.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::{Cvmh, NetworkConfig};
use crate::tensor::Tensor;
use crate::train::AdamW;

pub const MAGIC: &[u8; 4] = b"CVCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub network: NetworkConfig,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// Training loss of the last step, if any.
    pub loss: Option<f64>,
    pub normalization: Normalization,
    pub ignore_index: Option<u32>,
    #[serde(default)]
    pub palette: Vec<[u8; 3]>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    with_suffix(path, ".json")
}

pub fn optimizer_path(path: &Path) -> PathBuf {
    with_suffix(path, ".optim.cvck")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = with_suffix(path, ".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_tensors(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos.saturating_add(n))
            .ok_or_else(|| Error::format(path, "truncated checkpoint"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::format(path, "missing CVCK magic"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_of(take(4)?);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = u32_of(take(4)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_of(take(4)?) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank).map(|_| take(4).map(|b| u32_of(b) as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = take(n.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(path, &bytes)
}

pub fn save(path: &Path, store: &ParamStore<f32>, meta: &CheckpointMeta, opt: Option<&AdamW<f32>>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, &encode_tensors(&store.named_tensors()))?;
    if let Some(opt) = opt {
        write_atomic(&optimizer_path(path), &encode_tensors(&opt.state_tensors(store)))?;
    }
    write_atomic(&sidecar_path(path), (serde_json::to_string_pretty(meta)? + "\n").as_bytes())
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if meta.version != VERSION {
        return Err(Error::format(side, format!("unsupported checkpoint version {}", meta.version)));
    }
    Ok(meta)
}

/// A model rebuilt from a checkpoint.
pub struct Loaded {
    pub meta: CheckpointMeta,
    pub model: Cvmh,
    pub store: ParamStore<f32>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let meta = load_meta(path)?;
    let mut store = ParamStore::new();
    let model = Cvmh::new(&mut store, meta.network.clone(), 0)?;
    store
        .load_named(&read_tensors(path)?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Loaded { meta, model, store })
}
