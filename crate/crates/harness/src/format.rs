//! Binary adapter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LORI" | version: u32 | metadata length: u32 | metadata (JSON)
//! payload: per slot, A (f32, row-major), B (f32, row-major), M (bit-packed, LSB-first)
//! crc32 of the payload: u32
//! ```

use std::fs;
use std::path::Path;

use lori_core::{BitMask, LoriAdapter, LowRank, Matrix, Purpose, RngStream, SlotId, SparsityConfig, StreamKey};
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"LORI";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an adapter file: magic \"{}\", expected \"LORI\"", .found.escape_ascii())]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found}; this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum failure: {0}")]
    Checksum(String),
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("invalid adapter data: {0}")]
    Adapter(#[from] lori_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamMeta {
    pub seed: u64,
    pub purpose: u64,
    pub task_id: u64,
    pub layer: u64,
    pub slot: u64,
}

impl From<&RngStream> for StreamMeta {
    fn from(s: &RngStream) -> Self {
        Self { seed: s.seed, purpose: s.key.purpose.code(), task_id: s.key.task_id, layer: s.key.layer, slot: s.key.slot }
    }
}

impl StreamMeta {
    fn stream(&self) -> Result<RngStream, FormatError> {
        let purpose = Purpose::from_code(self.purpose)?;
        Ok(RngStream::new(self.seed, StreamKey::new(purpose, self.task_id, self.layer, self.slot)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotMeta {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub calibrated: bool,
    pub stream: StreamMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityMeta {
    pub sparsity: f64,
    pub granularity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub task_id: u64,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
    pub sparsity: Option<SparsityMeta>,
    pub created_by: String,
    pub slots: Vec<SlotMeta>,
}

/// A whole adapter set plus its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFile {
    pub meta: AdapterMeta,
    pub adapters: Vec<LoriAdapter>,
}

impl AdapterFile {
    /// `names` labels each slot; pass model slot ids or any stable strings.
    pub fn new(
        adapters: Vec<LoriAdapter>,
        names: Vec<String>,
        seed: u64,
        sparsity: Option<SparsityConfig>,
    ) -> Result<Self, FormatError> {
        let first = adapters.first().ok_or_else(|| FormatError::Metadata("no adapters to store".into()))?;
        if names.len() != adapters.len() {
            return Err(FormatError::Metadata(format!("{} names for {} adapters", names.len(), adapters.len())));
        }
        let (task_id, rank, alpha) = (first.task_id(), first.shape().r, first.alpha());
        if adapters.iter().any(|a| a.task_id() != task_id || a.shape().r != rank || a.alpha() != alpha) {
            return Err(FormatError::Metadata("adapters disagree on task id, rank or alpha".into()));
        }
        let slots = adapters
            .iter()
            .zip(names)
            .map(|(a, name)| SlotMeta {
                name,
                d_in: a.shape().d_in,
                d_out: a.shape().d_out,
                calibrated: a.is_calibrated(),
                stream: a.stream().into(),
            })
            .collect();
        let meta = AdapterMeta {
            task_id,
            rank,
            alpha,
            seed,
            sparsity: sparsity.map(|s| SparsityMeta { sparsity: s.sparsity, granularity: s.granularity.to_string() }),
            created_by: format!("lori-harness {}", env!("CARGO_PKG_VERSION")),
            slots,
        };
        Ok(Self { meta, adapters })
    }

    /// Slot names parsed as model slot ids, when they are ones.
    pub fn slot_ids(&self) -> Option<Vec<SlotId>> {
        self.meta.slots.iter().map(|s| s.name.parse().ok()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| FormatError::Metadata(e.to_string()))?;
        let mut payload = Vec::new();
        for ad in &self.adapters {
            push_f32(&mut payload, ad.a());
            push_f32(&mut payload, ad.b());
            payload.extend_from_slice(&ad.mask().to_bytes());
        }
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload.len() + 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(meta.len()).expect("metadata under 4 GiB").to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic { found: bytes[..bytes.len().min(4)].to_vec() });
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Checksum("file truncated inside the header".into()));
        }
        let version = read_u32(&bytes[4..8]);
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let meta_len = read_u32(&bytes[8..12]) as usize;
        let payload_start = HEADER_LEN.checked_add(meta_len).filter(|&p| p + 4 <= bytes.len()).ok_or_else(|| {
            FormatError::Checksum(format!("file truncated: {} bytes cannot hold {meta_len} bytes of metadata", bytes.len()))
        })?;
        let (payload, stored) = bytes[payload_start..].split_at(bytes.len() - payload_start - 4);
        let (stored, computed) = (read_u32(stored), crc32fast::hash(payload));
        if stored != computed {
            return Err(FormatError::Checksum(format!("stored {stored:08x}, computed {computed:08x}")));
        }

        let meta: AdapterMeta = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
            .map_err(|e| FormatError::Metadata(e.to_string()))?;
        let r = meta.rank as u128;
        let expected = meta.slots.iter().fold(0u128, |acc, s| {
            let (d_in, d_out) = (s.d_in as u128, s.d_out as u128);
            acc + 4 * (d_in * r + r * d_out) + (r * d_out).div_ceil(8)
        });
        if expected != payload.len() as u128 {
            return Err(FormatError::Metadata(format!(
                "metadata describes {expected} payload bytes, file has {}",
                payload.len()
            )));
        }
        let mut rest = payload;
        let mut adapters = Vec::with_capacity(meta.slots.len());
        for s in &meta.slots {
            let a = take_f32(&mut rest, s.d_in, meta.rank)?;
            let b = take_f32(&mut rest, meta.rank, s.d_out)?;
            let n = (meta.rank * s.d_out).div_ceil(8);
            let (m, tail) = rest.split_at(n);
            rest = tail;
            let mask = BitMask::from_bytes(meta.rank, s.d_out, m)?;
            adapters.push(LoriAdapter::from_parts(a, b, mask, meta.alpha, meta.task_id, s.stream.stream()?, s.calibrated)?);
        }
        Ok(Self { meta, adapters })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("four bytes"))
}

fn push_f32(out: &mut Vec<u8>, m: &Matrix) {
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn take_f32(rest: &mut &[u8], rows: usize, cols: usize) -> Result<Matrix, FormatError> {
    let (head, tail) = rest.split_at(4 * rows * cols);
    *rest = tail;
    let data = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64).collect();
    Ok(Matrix::from_vec(rows, cols, data)?)
}
