//! Versioned little-endian checkpoint format.
//!
//! ```text
//! magic            8 bytes  "WTAGCKPT"
//! version          u32
//! config_len       u32
//! config           config_len bytes of TOML (the ModelConfig)
//! tensor_count     u32
//! tensor_count x {
//!     name_len     u16
//!     name         name_len bytes UTF-8
//!     ndim         u8
//!     dims         ndim x u32
//!     crc32        u32 over the raw data bytes
//!     data         prod(dims) x f32
//! }
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::{Parameterized, Real};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WTAGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes every parameter and running statistic as `f32`.
pub fn write_checkpoint<T: Real>(net: &Network<T>) -> Result<Vec<u8>> {
    let config = net.config.to_toml()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());

    let mut tensors = Vec::new();
    net.visit("", &mut |name, p| {
        let raw: Vec<u8> = p
            .value
            .iter()
            .flat_map(|v| (v.f64() as f32).to_le_bytes())
            .collect();
        tensors.push((name.to_string(), p.dims.clone(), raw));
    });
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, raw) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&crc32fast::hash(&raw).to_le_bytes());
        out.extend_from_slice(&raw);
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(net)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|_| Error::CorruptCheckpoint("config is not UTF-8".into()))?;
    let config = ModelConfig::from_toml(config)
        .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    let mut net = Network::<f32>::zeroed(config)?;

    let count = r.u32("tensor count")? as usize;
    let mut stored = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let checksum = r.u32("checksum")?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &format!("data of {name}"))?;
        if crc32fast::hash(raw) != checksum {
            return Err(Error::CorruptCheckpoint(format!("checksum mismatch for {name}")));
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        stored.insert(name, (dims, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut problem = None;
    net.visit_mut("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        match stored.remove(name) {
            Some((dims, values)) if dims == p.dims => p.value = values,
            Some((dims, _)) => {
                problem = Some(format!("{name}: stored dims {dims:?}, expected {:?}", p.dims))
            }
            None => problem = Some(format!("missing tensor {name}")),
        }
    });
    if let Some(msg) = problem {
        return Err(Error::CorruptCheckpoint(msg));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::CorruptCheckpoint(format!("unexpected tensor {extra}")));
    }
    Ok(net)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
