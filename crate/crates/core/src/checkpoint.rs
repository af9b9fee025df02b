//! Named-tensor archive with an embedded plain-text manifest.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "SGCK" | version | manifest_len | manifest (UTF-8)
//! count | { name_len | name | dtype u8 | ndim | dims.. | payload }*
//! ```
//!
//! `dtype` 0 is `f64`, 1 is `f32`. Tensors are written in name order, so
//! saving the same store twice yields identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, manifest: impl Into<String>) -> Self {
        Self { manifest: manifest.into(), tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect() }
    }

    pub fn into_store(self) -> Result<(ParamStore, String)> {
        let mut store = ParamStore::new();
        for (name, t) in self.tensors {
            store.insert(name, t)?;
        }
        Ok((store, self.manifest))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_u32(w, self.manifest.len())?;
        w.write_all(self.manifest.as_bytes())?;
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[0u8])?;
            write_u32(w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let manifest = read_string(r)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(r)?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype[0] {
                0 => (0..n)
                    .map(|_| {
                        let mut b = [0u8; 8];
                        r.read_exact(&mut b).map(|_| f64::from_le_bytes(b))
                    })
                    .collect::<std::io::Result<Vec<_>>>()?,
                1 => (0..n)
                    .map(|_| {
                        let mut b = [0u8; 4];
                        r.read_exact(&mut b).map(|_| f32::from_le_bytes(b) as f64)
                    })
                    .collect::<std::io::Result<Vec<_>>>()?,
                other => return Err(Error::Format(format!("unknown dtype tag {other} for `{name}`"))),
            };
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
