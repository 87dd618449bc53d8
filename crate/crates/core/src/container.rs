//! Binary container for dense `(T, N, D)` float blocks.
//!
//! Layout, little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `SBFT`                  |
//! | 4      | 2    | version (`u16`, currently 1)  |
//! | 6      | 4    | `T` (`u32`)                   |
//! | 10     | 4    | `N` (`u32`)                   |
//! | 14     | 4    | `D` (`u32`)                   |
//! | 18     | 1    | dtype code (1 = `f32`)        |
//! | 19     | 13   | reserved, zero                |
//! | 32     | ...  | `T*N*D` values, row-major     |
//!
//! Each block has a sidecar `<file>.json` holding `{"clip_id": ...}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SBFT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl FeatureBlock {
    pub fn new(t: usize, n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != t * n * d {
            return Err(Error::shape(
                "feature block",
                format!("{} values for (T={t}, N={n}, D={d})", t * n * d),
                data.len(),
            ));
        }
        Ok(Self { t, n, d, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.t, self.n, self.d)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    clip_id: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_header(t: usize, n: usize, d: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(MAGIC);
    h[4..6].copy_from_slice(&VERSION.to_le_bytes());
    h[6..10].copy_from_slice(&(t as u32).to_le_bytes());
    h[10..14].copy_from_slice(&(n as u32).to_le_bytes());
    h[14..18].copy_from_slice(&(d as u32).to_le_bytes());
    h[18] = DTYPE_F32;
    h
}

pub fn write_block(path: &Path, block: &FeatureBlock, clip_id: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * block.data.len());
    bytes.extend_from_slice(&encode_header(block.t, block.n, block.d));
    for v in &block.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&Sidecar {
        clip_id: clip_id.to_string(),
    })
    .expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Reads a block and its sidecar clip id (if the sidecar exists).
pub fn read_block(path: &Path) -> Result<(FeatureBlock, Option<String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let block = decode(path, &bytes)?;
    let side = sidecar_path(path);
    let clip_id = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let s: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        Some(s.clip_id)
    } else {
        None
    };
    Ok((block, clip_id))
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<FeatureBlock> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected SBFT"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (t, n, d) = (word(6), word(10), word(14));
    let dtype = bytes[18];
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype {
            path: path.into(),
            code: dtype,
        });
    }
    let count = t
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::format(path, "dimension product overflows"))?;
    let expected = (HEADER_LEN + 4 * count) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureBlock { t, n, d, data })
}
