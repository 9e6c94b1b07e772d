//! Binary checkpoint of a [`Model`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TESSPCKP"
//! version    u32      currently 1
//! config     u32 byte length, then UTF-8 lines `key=value` (model.* keys)
//! count      u32      number of tensors
//! tensor     u32 name length, UTF-8 name, u32 rank, rank × u64 dims,
//!            product(dims) × f64 values (row-major)
//! ```
//!
//! Tensors are written in name order, so saving the same model twice gives
//! identical bytes.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError, ParamStore};
use crate::compute::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TESSPCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt("non-UTF-8 string".into()))
}

fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

impl Model {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let config: String = self
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        write_string(w, &config)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            write_string(w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Model, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut config = ModelConfig::default();
        for line in read_string(r)?.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Corrupt(format!("config line `{line}`")))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        let count = read_u32(r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = read_string(r)?;
            let rank = read_u32(r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Corrupt(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<io::Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("`{name}`: {e}")))?;
            params.insert(name, t);
        }
        Ok(Model { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model, CheckpointError> {
        Self::read_checkpoint(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, CheckpointError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }
}
