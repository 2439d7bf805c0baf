//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MFCK"  u32 version  u32 meta_len  meta (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u16 name_len, name, u8 ndim, ndim × u32 dims
//! raw f32 data for every tensor, in table order
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamSet;

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_params(&mut self, prefix: &str, p: &impl ParamSet) {
        for (name, shape, data) in p.tensors() {
            self.tensors.push(Tensor {
                name: format!("{prefix}.{name}"),
                shape,
                data: data.iter().map(|v| *v as f32).collect(),
            });
        }
    }

    /// Loads tensors named `prefix.*` into `p`, checking names and shapes.
    pub fn load_params(&self, prefix: &str, p: &mut impl ParamSet) -> Result<(), CheckpointError> {
        let wanted: Vec<(String, Vec<usize>)> = p
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (format!("{prefix}.{n}"), s))
            .collect();
        let mut sources = Vec::with_capacity(wanted.len());
        for (name, shape) in &wanted {
            let t = self
                .tensor(name)
                .ok_or_else(|| CheckpointError::ShapeMismatch(format!("missing tensor {name}")))?;
            if &t.shape != shape {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "{name}: file has {:?}, model expects {:?}",
                    t.shape, shape
                )));
            }
            sources.push(t);
        }
        for (dst, src) in p.tensors_mut().into_iter().zip(sources) {
            for (d, s) in dst.iter_mut().zip(&src.data) {
                *d = f64::from(*s);
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[t.shape.len() as u8])?;
            for d in &t.shape {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
        }
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "{} declares {expected} values but holds {}",
                    t.name,
                    t.data.len()
                )));
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = serde_json::from_slice(&meta).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let count = read_u32(r)? as usize;
        let mut table = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let shape = (0..ndim[0])
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            table.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
