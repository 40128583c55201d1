//! Checkpoint format, all integers little-endian:
//!
//! ```text
//! b"VNT1" | u32 record count | per record:
//!     u16 name length | UTF-8 name | u8 rank | rank x u32 dims | f32 payload
//! ```
//!
//! Training metadata goes to a JSON sidecar at `<path>.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, DataError, Result};
use crate::model::{ModelConfig, Params, ViNet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VNT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub seed: u64,
    /// SHA-256 of the config's JSON form.
    pub config_hash: String,
    pub config: ModelConfig,
}

impl CheckpointMeta {
    pub fn new(config: &ModelConfig, step: u64, seed: u64) -> Self {
        let json = serde_json::to_string(config).expect("config serializes");
        Self {
            format_version: CHECKPOINT_VERSION,
            step,
            seed,
            config_hash: format!("{:x}", Sha256::digest(json.as_bytes())),
            config: config.clone(),
        }
    }
}

fn ckpt_err(path: &Path, msg: impl ToString) -> DataError {
    DataError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

pub fn encode_params(params: &Params) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let count = u32::try_from(params.len()).map_err(|_| "too many records")?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| format!("name '{name}' too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| format!("'{name}' has too many dimensions"))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| format!("'{name}' dimension {d} exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated payload")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> std::result::Result<Params, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| "bad magic")? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let count = r.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "record name is not UTF-8")?.to_string();
        let rank = r.take(1)?[0] as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| format!("dimensions of '{name}' overflow"))?;
        let payload = r.take(n * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if params.get(&name).is_some() {
            return Err(format!("duplicate record '{name}'"));
        }
        params.insert(&name, Tensor::new(&dims, data).map_err(|e| e.to_string())?);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(params)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes to a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_checkpoint(path: &Path, params: &Params, meta: Option<&CheckpointMeta>) -> Result<()> {
    let bytes = encode_params(params).map_err(|e| ckpt_err(path, e))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_atomic(path, &bytes)?;
    if let Some(meta) = meta {
        let json = serde_json::to_vec_pretty(meta).expect("metadata serializes");
        write_atomic(&sidecar(path), &json)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Params> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_params(&bytes).map_err(|e| ckpt_err(path, e))
}

/// Sidecar metadata, if one was written.
pub fn load_meta(path: &Path) -> Result<Option<CheckpointMeta>> {
    let p = sidecar(path);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read(&p).map_err(io_err(&p))?;
    serde_json::from_slice(&text).map(Some).map_err(|e| ckpt_err(&p, e))
}

pub fn save_model(path: &Path, model: &ViNet, step: u64, seed: u64) -> Result<()> {
    save_checkpoint(path, model.params(), Some(&CheckpointMeta::new(model.config(), step, seed)))
}

/// Loads weights and rebuilds the model from the sidecar's config.
pub fn load_model(path: &Path) -> Result<ViNet> {
    let meta = load_meta(path)?.ok_or_else(|| ckpt_err(path, "missing metadata sidecar"))?;
    let params = load_checkpoint(path)?;
    Ok(ViNet::from_params(meta.config, params)?)
}
