//! Checkpoint files.
//!
//! Layout, little-endian: magic `SBCK`, `u16` version, `u64` header length,
//! a JSON header ([`CheckpointHeader`]), then every parameter as raw `f64`
//! values in header order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

use super::config::RunConfig;
use super::model::SlotBert;

pub const MAGIC: &[u8; 4] = b"SBCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha key, hex encoded.
    pub seed: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes: Vec<u8> = (0..self.seed.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(self.seed.get(i..i + 2).unwrap_or("zz"), 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument("bad rng seed encoding".into()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::InvalidArgument("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: String,
    pub config_hash: String,
    pub step: u64,
    pub rng: RngState,
    pub metrics: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

/// A loaded checkpoint with its model rebuilt.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub config: RunConfig,
    pub model: SlotBert,
    pub params: ParamStore,
}

pub fn save(
    path: &Path,
    cfg: &RunConfig,
    params: &ParamStore,
    step: u64,
    rng: &ChaCha8Rng,
    metrics: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        config: cfg.to_text(),
        config_hash: cfg.hash(),
        step,
        rng: RngState::capture(rng),
        metrics,
        params: params
            .iter()
            .map(|(_, name, m)| ParamEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(14 + json.len() + 8 * params.num_scalars());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, _, m) in params.iter() {
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |expected: usize| Error::Truncated {
        path: path.into(),
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 14 {
        return Err(truncated(14));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected SBCK"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    if bytes.len() < 14 + hlen {
        return Err(truncated(14 + hlen));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[14..14 + hlen])
        .map_err(|e| Error::format(path, e.to_string()))?;
    let config = RunConfig::parse(&header.config)?;
    if config.hash() != header.config_hash {
        return Err(Error::format(path, "config hash does not match the stored config"));
    }
    let (model, mut params) = SlotBert::build(&config)?;
    let total: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    let expected = 14 + hlen + 8 * total;
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    if header.params.len() != params.len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint has {} tensors, model expects {}",
                header.params.len(),
                params.len()
            ),
        ));
    }
    let mut offset = 14 + hlen;
    for entry in &header.params {
        let id = params
            .find(&entry.name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter {}", entry.name)))?;
        let target = params.get_mut(id);
        if target.shape() != (entry.rows, entry.cols) {
            return Err(Error::shape(
                format!("parameter {}", entry.name),
                format!("{:?}", target.shape()),
                format!("({}, {})", entry.rows, entry.cols),
            ));
        }
        for v in target.data_mut() {
            *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    }
    Ok(Checkpoint {
        header,
        config,
        model,
        params,
    })
}
