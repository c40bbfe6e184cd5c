//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CSFMCKPT"
//! version  u32      currently 1
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     f64 × prod(dims)
//! ```
//!
//! A text manifest with one `name<TAB>shape<TAB>numel` line per tensor is
//! written next to it as `<path>.manifest`.

use std::fs;
use std::path::{Path, PathBuf};

use super::Tensor;
use crate::error::{Error, Result};
use crate::raster::{push_f64s, Cursor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSFMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut manifest = format!("version={CHECKPOINT_VERSION}\ntensors={}\n", tensors.len());
    for t in tensors {
        bytes.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(t.name.as_bytes());
        bytes.extend_from_slice(&(t.tensor.shape().len() as u32).to_le_bytes());
        for &d in t.tensor.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        push_f64s(&mut bytes, t.tensor.data());
        let shape: Vec<String> = t.tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", t.name, shape.join("x"), t.tensor.numel()));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&bytes, path);
    cur.magic(CHECKPOINT_MAGIC)?;
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.bytes(len)?)
            .map_err(|_| Error::Format(format!("{}: tensor name is not UTF-8", path.display())))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = cur.f64s(shape.iter().product())?;
        out.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    cur.finish()?;
    Ok(out)
}
