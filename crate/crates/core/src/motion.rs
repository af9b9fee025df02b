//! Per-frame vertex offsets over a template mesh, and the `SGMO` file format.
//!
//! `SGMO` layout, little-endian: magic `"SGMO"`, version `u32`, `T u32`,
//! `V u32`, frame rate `f32`, then `T·V·3` `f32` offsets in frame-major,
//! vertex-major, xyz order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SGMO";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: usize,
    vertices: usize,
    offsets: Vec<f64>,
    pub frame_rate: f64,
}

impl MotionSequence {
    pub fn new(frames: usize, vertices: usize, offsets: Vec<f64>, frame_rate: f64) -> Result<Self> {
        if frames == 0 || vertices == 0 {
            return Err(Error::invalid("motion needs at least one frame and one vertex"));
        }
        if offsets.len() != frames * vertices * 3 {
            return Err(Error::shape(format!("{} offsets for {frames}x{vertices}x3", offsets.len())));
        }
        if offsets.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MotionSequence::new"));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        Ok(Self { frames, vertices, offsets, frame_rate })
    }

    /// `[T, V*3]` tensor view.
    pub fn from_tensor(t: &Tensor, vertices: usize, frame_rate: f64) -> Result<Self> {
        if t.cols() != vertices * 3 {
            return Err(Error::shape(format!("tensor width {} for {vertices} vertices", t.cols())));
        }
        Self::new(t.rows(), vertices, t.to_vec(), frame_rate)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, self.vertices * 3], self.offsets.clone()).expect("validated on construction")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.vertices * 3;
        &self.offsets[t * w..(t + 1) * w]
    }

    pub fn vertex(&self, t: usize, v: usize) -> [f64; 3] {
        let f = self.frame(t);
        [f[3 * v], f[3 * v + 1], f[3 * v + 2]]
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::invalid(format!("frame range {start}..{end} of {}", self.frames)));
        }
        let w = self.vertices * 3;
        Self::new(end - start, self.vertices, self.offsets[start * w..end * w].to_vec(), self.frame_rate)
    }

    pub fn concat(parts: &[MotionSequence]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut offsets = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.vertices != first.vertices {
                return Err(Error::shape("concatenating motions with different vertex counts"));
            }
            frames += p.frames;
            offsets.extend_from_slice(&p.offsets);
        }
        Self::new(frames, first.vertices, offsets, first.frame_rate)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.vertices as u32).to_le_bytes())?;
        w.write_all(&(self.frame_rate as f32).to_le_bytes())?;
        for v in &self.offsets {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a motion file (expected SGMO)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported SGMO version {version}")));
        }
        let frames = read_u32(r)? as usize;
        let vertices = read_u32(r)? as usize;
        let frame_rate = read_f32(r)? as f64;
        let offsets = read_f32s(r, frames * vertices * 3)?;
        Self::new(frames, vertices, offsets, frame_rate)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.offsets.len() * 4);
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut fs::read(path)?.as_slice())
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}
