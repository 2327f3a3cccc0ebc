//! Named parameter registry and the HGCK checkpoint format.
//!
//! Checkpoint layout, all little-endian: magic `HGCK`, u32 version,
//! u32 parameter count, then per parameter: u16 name length, UTF-8 name,
//! u8 rank, u32 extents, float32 data. Round-trips bit-exactly.

use super::DiffArray;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HGCK";
const VERSION: u32 = 1;

/// A learnable array with a unique path-style name.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub array: DiffArray,
}

/// Ordered collection of model parameters. Iteration order is insertion
/// order, which the optimizer and checkpoint writer rely on.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, array: DiffArray) -> Result<()> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        if !array.requires_grad() {
            return Err(Error::Contract(format!(
                "parameter {name:?} must require gradients"
            )));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, array });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.array.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.array.zero_grad();
        }
    }

    /// Sum of squared parameter values, for divergence diagnostics.
    pub fn l2_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.array.to_vec())
            .map(|v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("parameter name too long: {}", p.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = p.array.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Contract(format!("parameter rank too large: {}", p.name)));
        }
        buf.push(shape.len() as u8);
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.array.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// A parameter as read from disk, before binding to a model.
#[derive(Debug)]
pub struct RawParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_string(),
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<RawParam>> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(display.clone(), e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path: &display,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: display.clone(),
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = cur.u32_le("version")?;
    if version != VERSION {
        return Err(Error::Format {
            path: display.clone(),
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = cur.u32_le("parameter count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u16_le("name length")? as usize;
        let name_off = cur.pos;
        let name_bytes = cur.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format {
                path: display.clone(),
                offset: name_off as u64,
                message: "parameter name is not valid UTF-8".into(),
            })?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32_le("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data_bytes = cur.take(numel * 4, &format!("data of {name}"))?;
        let data: Vec<f32> = data_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(RawParam { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            path: display.clone(),
            offset: cur.pos as u64,
            message: format!("{} trailing bytes after last parameter", bytes.len() - cur.pos),
        });
    }
    Ok(out)
}

/// Bind checkpoint contents to an existing model's parameters, by name.
/// Every stored parameter must match a registered one in name and shape,
/// and vice versa.
pub fn load_into(store: &ParamStore, raw: Vec<RawParam>) -> Result<()> {
    if raw.len() != store.len() {
        let stored: Vec<&str> = raw.iter().map(|r| r.name.as_str()).collect();
        return Err(Error::Contract(format!(
            "checkpoint has {} parameters, model expects {} (checkpoint names: {:?})",
            raw.len(),
            store.len(),
            stored
        )));
    }
    for r in raw {
        let p = store.get(&r.name).ok_or_else(|| {
            Error::Contract(format!("checkpoint parameter {:?} not present in model", r.name))
        })?;
        if p.array.shape() != r.shape.as_slice() {
            return Err(Error::Dimension {
                context: format!("checkpoint parameter {:?}", r.name),
                left: p.array.shape().to_vec(),
                right: r.shape,
            });
        }
        p.array.set_data(&r.data);
    }
    Ok(())
}
