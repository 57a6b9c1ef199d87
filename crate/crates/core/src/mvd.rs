//! MVD container: a tiny binary format for volumes, label maps, and fields.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `MVD1` |
//! | 1     | kind: 1 = volume, 2 = labels, 3 = displacement field |
//! | 1     | rank `D` |
//! | 2     | reserved, 0 |
//! | 4·D   | extents (`u32`) |
//! | 4     | channels (`u32`) |
//! | …     | payload, row-major: `f32` for kinds 1 and 3, `u32` for kind 2 |

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::grid::Grid;
use crate::volume::{DisplacementField, LabelMap, Volume};

pub const MAGIC: &[u8; 4] = b"MVD1";

#[derive(Debug, Error)]
pub enum MvdError {
    #[error("bad magic {0:?}, expected \"MVD1\"")]
    BadMagic([u8; 4]),
    #[error("unknown payload kind {0}")]
    UnknownKind(u8),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MvdKind {
    Volume = 1,
    Labels = 2,
    Field = 3,
}

impl MvdKind {
    fn from_byte(b: u8) -> Result<Self, MvdError> {
        match b {
            1 => Ok(MvdKind::Volume),
            2 => Ok(MvdKind::Labels),
            3 => Ok(MvdKind::Field),
            other => Err(MvdError::UnknownKind(other)),
        }
    }
}

/// Anything an MVD file can hold, at file precision.
#[derive(Clone, Debug, PartialEq)]
pub enum MvdPayload {
    Volume(Volume<f32>),
    Labels(LabelMap),
    Field(DisplacementField<f32>),
}

impl MvdPayload {
    pub fn kind(&self) -> MvdKind {
        match self {
            MvdPayload::Volume(_) => MvdKind::Volume,
            MvdPayload::Labels(_) => MvdKind::Labels,
            MvdPayload::Field(_) => MvdKind::Field,
        }
    }

    fn grid(&self) -> &Grid {
        match self {
            MvdPayload::Volume(v) => v.grid(),
            MvdPayload::Labels(l) => l.grid(),
            MvdPayload::Field(f) => f.grid(),
        }
    }

    fn channels(&self) -> usize {
        match self {
            MvdPayload::Volume(v) => v.channels(),
            MvdPayload::Labels(_) => 1,
            MvdPayload::Field(f) => f.rank(),
        }
    }
}

/// Header size in bytes for a rank-`d` payload.
pub fn header_len(rank: usize) -> usize {
    4 + 1 + 1 + 2 + 4 * rank + 4
}

pub fn encode(payload: &MvdPayload) -> Vec<u8> {
    let grid = payload.grid();
    let mut out = Vec::with_capacity(header_len(grid.rank()) + grid.numel() * payload.channels() * 4);
    out.extend_from_slice(MAGIC);
    out.push(payload.kind() as u8);
    out.push(grid.rank() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for &e in grid.extents() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.extend_from_slice(&(payload.channels() as u32).to_le_bytes());
    match payload {
        MvdPayload::Volume(v) => v.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        MvdPayload::Labels(l) => l.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        MvdPayload::Field(f) => f.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<MvdPayload, MvdError> {
    if bytes.len() < 8 {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(MvdError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        return Err(MvdError::Truncated { expected: 8, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(MvdError::BadMagic(magic));
    }
    let kind = MvdKind::from_byte(bytes[4])?;
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(MvdError::InvalidHeader("rank 0".into()));
    }
    let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
    if reserved != 0 {
        return Err(MvdError::InvalidHeader(format!("reserved field is {reserved}")));
    }
    let hlen = header_len(rank);
    if bytes.len() < hlen {
        return Err(MvdError::Truncated { expected: hlen, found: bytes.len() });
    }
    let extents: Vec<usize> = (0..rank).map(|i| u32_at(bytes, 8 + 4 * i) as usize).collect();
    let channels = u32_at(bytes, 8 + 4 * rank) as usize;
    let grid = Grid::new(extents).map_err(|e| MvdError::InvalidHeader(e.to_string()))?;
    let count = grid.numel() * channels;
    let expected = hlen + 4 * count;
    if bytes.len() < expected {
        return Err(MvdError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(MvdError::InvalidHeader(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let body = &bytes[hlen..];
    let invalid = |e: crate::error::Error| MvdError::InvalidHeader(e.to_string());
    match kind {
        MvdKind::Volume => {
            let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Volume::new(grid, channels, data).map(MvdPayload::Volume).map_err(invalid)
        }
        MvdKind::Labels => {
            if channels != 1 {
                return Err(MvdError::InvalidHeader(format!("label map with {channels} channels")));
            }
            let data = body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            LabelMap::new(grid, data).map(MvdPayload::Labels).map_err(invalid)
        }
        MvdKind::Field => {
            if channels != grid.rank() {
                return Err(MvdError::InvalidHeader(format!("field with {channels} components on rank {}", grid.rank())));
            }
            let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            DisplacementField::new(grid, data).map(MvdPayload::Field).map_err(invalid)
        }
    }
}

pub fn write(path: impl AsRef<Path>, payload: &MvdPayload) -> Result<(), MvdError> {
    fs::write(path, encode(payload))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<MvdPayload, MvdError> {
    decode(&fs::read(path)?)
}
