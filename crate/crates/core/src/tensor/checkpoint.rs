//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `SGCK`, u32 version, u8 dtype width, u64 config length and
//! the UTF-8 config JSON, u32 parameter count, then per parameter a u32 name
//! length, the name, a trainable byte, u32 rank, u64 dims and the raw values.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ParamSet, Parameter, Real, Tensor};

const MAGIC: &[u8; 4] = b"SGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint stores {found}-byte values, expected {expected}")]
    DtypeMismatch { expected: usize, found: usize },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint config is not valid UTF-8")]
    BadConfig,
}

/// Checkpoint contents: the model configuration as JSON plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_json: String,
    pub params: ParamSet<T>,
}

pub fn to_bytes<T: Real>(config_json: &str, params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<usize, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }
    fn string(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::BadConfig)
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let mut r = Reader { buf: bytes };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let width = r.u8()? as usize;
    if width != T::BYTES {
        return Err(CheckpointError::DtypeMismatch { expected: T::BYTES, found: width });
    }
    let clen = r.u64()?;
    let config_json = r.string(clen)?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = r.string(nlen)?;
        let trainable = r.u8()? != 0;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(T::BYTES).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let tensor = Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated)?;
        params.push(Parameter { name, tensor, trainable });
    }
    Ok(Checkpoint { config_json, params: params.into() })
}

pub fn save<T: Real>(path: &Path, config_json: &str, params: &ParamSet<T>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(config_json, params))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
