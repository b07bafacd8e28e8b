//! Binary tensor container.
//!
//! One format carries backbone weights, exported activations/features and
//! classifier parameters, which keeps the cross-ecosystem adapter small:
//! anything that can emit this layout can feed the harness.
//!
//! Layout, all little-endian:
//!
//! ```text
//! u32                  entry count
//! per entry:
//!   u8                 kind (0=conv 1=dense 2=logits 3=raw tensor)
//!   u8                 rank of the main tensor
//!   rank x u32         dims of the main tensor
//!   u32                bias length (0 = entry has no bias)
//! payload:             per entry, main tensor then bias, f32 row-major
//! u64                  FNV-1a checksum of every preceding byte
//! ```
//!
//! Values are held as f64 in memory and truncated to f32 on the wire.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const KIND_CONV: u8 = 0;
pub const KIND_DENSE: u8 = 1;
pub const KIND_LOGITS: u8 = 2;
pub const KIND_TENSOR: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerEntry {
    pub kind: u8,
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ContainerEntry {
    pub fn tensor(dims: Vec<u32>, values: Vec<f64>) -> Self {
        ContainerEntry {
            kind: KIND_TENSOR,
            dims,
            values,
            bias: Vec::new(),
        }
    }

    pub fn value_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode(entries: &[ContainerEntry]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        if e.values.len() != e.value_len() {
            return Err(Error::Shape(format!(
                "entry payload length {} does not match dims {:?}",
                e.values.len(),
                e.dims
            )));
        }
        buf.push(e.kind);
        buf.push(e.dims.len() as u8);
        for &d in &e.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&(e.bias.len() as u32).to_le_bytes());
    }
    for e in entries {
        for &v in &e.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in &e.bias {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<ContainerEntry>, u64)> {
    if bytes.len() < 12 {
        return Err(Error::Import("container too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::Import(format!(
            "checksum mismatch: stored {stored:016x}, computed {computed:016x}"
        )));
    }

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Import("truncated container header".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = take(&mut pos, 1)?[0];
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
        }
        let bias_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        headers.push((kind, dims, bias_len));
    }

    let mut entries = Vec::with_capacity(count);
    for (kind, dims, bias_len) in headers {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64);
        }
        let mut bias = Vec::with_capacity(bias_len);
        for _ in 0..bias_len {
            bias.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64);
        }
        entries.push(ContainerEntry {
            kind,
            dims,
            values,
            bias,
        });
    }
    if pos != body.len() {
        return Err(Error::Import(format!(
            "container has {} trailing payload bytes",
            body.len() - pos
        )));
    }
    Ok((entries, stored))
}

pub fn write(path: &Path, entries: &[ContainerEntry]) -> Result<u64> {
    let bytes = encode(entries)?;
    let sum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    fs::write(path, bytes)?;
    Ok(sum)
}

pub fn read(path: &Path) -> Result<(Vec<ContainerEntry>, u64)> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
