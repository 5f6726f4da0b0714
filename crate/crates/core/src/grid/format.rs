//! PGRD: a small little-endian binary container for dense grids, with a
//! JSON sidecar for metadata.
//!
//! Layout: magic `PGRD`, `u16` version, `u8` dtype (0 = f64, 1 = f32),
//! `u8` rank, `rank × u32` dims, then the row-major payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PGRD_MAGIC: &[u8; 4] = b"PGRD";
pub const PGRD_VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridMeta {
    pub city: String,
    pub cell_meters: u32,
    pub slot_minutes: u32,
    #[serde(default)]
    pub categories: Vec<String>,
}

pub fn write_pgrd<S: Scalar>(tensor: &Tensor<S>) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    let rank = u8::try_from(shape.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    let mut buf = Vec::with_capacity(8 + 4 * shape.len() + S::BYTES * tensor.numel());
    buf.extend_from_slice(PGRD_MAGIC);
    buf.extend_from_slice(&PGRD_VERSION.to_le_bytes());
    buf.push(S::DTYPE);
    buf.push(rank);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    Ok(buf)
}

pub fn read_pgrd<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let bad = |msg: &str| Error::Format(msg.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != PGRD_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PGRD_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if bytes[6] != S::DTYPE {
        return Err(Error::Format(format!("dtype {} does not match requested {}", bytes[6], S::DTYPE)));
    }
    let rank = bytes[7] as usize;
    if rank == 0 {
        return Err(bad("rank 0"));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated dimensions"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let o = 8 + 4 * i;
        let d = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        count = count.checked_mul(d).ok_or_else(|| bad("dimension product overflows"))?;
        shape.push(d);
    }
    let payload = count.checked_mul(S::BYTES).ok_or_else(|| bad("payload size overflows"))?;
    if bytes.len() - header != payload {
        return Err(Error::Format(format!(
            "payload of {} bytes, expected {payload}",
            bytes.len() - header
        )));
    }
    let data = bytes[header..].chunks_exact(S::BYTES).map(S::read_le).collect();
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

/// `grid.pgrd` → `grid.pgrd.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_grid<S: Scalar>(path: &Path, tensor: &Tensor<S>, meta: &GridMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, write_pgrd(tensor)?)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_grid<S: Scalar>(path: &Path) -> Result<(Tensor<S>, GridMeta)> {
    let tensor = read_pgrd(&fs::read(path)?)?;
    let meta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    Ok((tensor, meta))
}
