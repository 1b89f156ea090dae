//! Self-describing binary tensor files and model checkpoints.
//!
//! The on-disk layout (all integers little-endian) is
//!
//! ```text
//! magic "OCDT" | version: u32 | tensor count: u32
//! per tensor:  name length: u32 | UTF-8 name | rank: u32
//!              | dims: rank x u64 | data: product(dims) x f32 LE
//! trailer:     CRC-32 of every preceding byte: u32
//! ```
//!
//! Values are stored at 32-bit precision while all computation runs at
//! 64 bits; a round trip is bit-exact at the stored precision. The same
//! container carries model checkpoints and persisted dataset tensors.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::conditioning::ConditionSource;
use crate::occupancy::{ConditioningMode, OccupancyError, Reconstructor, StateEntry};

/// File magic, the first four bytes of every tensor file.
pub const MAGIC: [u8; 4] = *b"OCDT";

/// The only format version this build reads or writes.
pub const VERSION: u32 = 1;

/// Sanity cap on tensor rank; real tensors here are rank 1 or 2.
pub const MAX_RANK: usize = 8;

/// Sanity cap on tensor-name length in bytes.
pub const MAX_NAME_LEN: usize = 4096;

/// What can go wrong while reading or writing a tensor file.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {got:?}, expected {MAGIC:?}")]
    BadMagic { got: [u8; 4] },
    #[error("unknown format version {got}, this build reads version {VERSION}")]
    UnknownVersion { got: u32 },
    #[error("file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("{extra} unexpected bytes after the crc trailer")]
    TrailingBytes { extra: usize },
    #[error("duplicate tensor name {name:?}")]
    DuplicateName { name: String },
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("tensor {name:?} has invalid rank {rank} (limit {MAX_RANK})")]
    InvalidRank { name: String, rank: usize },
    #[error("tensor {name:?} declares {declared} elements but holds {held}")]
    ElementCount { name: String, declared: usize, held: usize },
    #[error("tensor {name:?} is too large to address")]
    Oversized { name: String },
    #[error("checkpoint metadata {name} has invalid value {value}")]
    MetaInvalid { name: String, value: f64 },
    #[error("model state error: {0}")]
    Model(#[from] OccupancyError),
}

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self { name: name.into(), dims, data }
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize records to the container format, including the CRC trailer.
pub fn encode(records: &[TensorRecord]) -> Result<Vec<u8>, CheckpointError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(CheckpointError::DuplicateName { name: r.name.clone() });
        }
        if r.name.len() > MAX_NAME_LEN || r.name.is_empty() {
            return Err(CheckpointError::InvalidName);
        }
        if r.dims.is_empty() || r.dims.len() > MAX_RANK {
            return Err(CheckpointError::InvalidRank { name: r.name.clone(), rank: r.dims.len() });
        }
        let declared: usize = r.dims.iter().product();
        if declared != r.data.len() {
            return Err(CheckpointError::ElementCount {
                name: r.name.clone(),
                declared,
                held: r.data.len(),
            });
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, records.len() as u32);
    for r in records {
        push_u32(&mut buf, r.name.len() as u32);
        buf.extend_from_slice(r.name.as_bytes());
        push_u32(&mut buf, r.dims.len() as u32);
        for &d in &r.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&buf);
    push_u32(&mut buf, hasher.finalize());
    Ok(buf)
}

/// A cursor over the byte stream that reports truncation with context.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], CheckpointError> {
        // The final 4 bytes are the CRC trailer; records must not claim them.
        let limit = self.bytes.len().saturating_sub(4);
        if n > limit.saturating_sub(self.pos) {
            return Err(CheckpointError::Truncated { context });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, CheckpointError> {
        let s = self.take(4, context)?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, CheckpointError> {
        let s = self.take(8, context)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    }
}

/// Parse a container, validating structure first and the CRC trailer last
/// (so a recognizable bad version reports as such, not as a CRC failure).
pub fn decode(bytes: &[u8]) -> Result<Vec<TensorRecord>, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(CheckpointError::Truncated { context: "header" });
    }
    let got: [u8; 4] = bytes[..4].try_into().unwrap();
    if got != MAGIC {
        return Err(CheckpointError::BadMagic { got });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnknownVersion { got: version });
    }
    let mut r = Reader { bytes, pos: 8 };
    let count = r.u32("tensor count")? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len > MAX_NAME_LEN || name_len == 0 {
            return Err(CheckpointError::InvalidName);
        }
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::InvalidName)?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName { name });
        }
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(CheckpointError::InvalidRank { name, rank });
        }
        let mut dims = Vec::with_capacity(rank);
        let mut elems: usize = 1;
        for _ in 0..rank {
            let d = r.u64("dims")?;
            let d = usize::try_from(d).map_err(|_| CheckpointError::Oversized { name: name.clone() })?;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::Oversized { name: name.clone() })?;
            dims.push(d);
        }
        let nbytes = elems
            .checked_mul(4)
            .ok_or_else(|| CheckpointError::Oversized { name: name.clone() })?;
        let raw = r.take(nbytes, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(TensorRecord { name, dims, data });
    }
    let extra = bytes.len() - 4 - r.pos;
    if extra > 0 {
        return Err(CheckpointError::TrailingBytes { extra });
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes[..bytes.len() - 4]);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    Ok(records)
}

/// Write records to a file.
pub fn write_tensor_file(path: &Path, records: &[TensorRecord]) -> Result<(), CheckpointError> {
    let bytes = encode(records)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Read records from a file.
pub fn read_tensor_file(path: &Path) -> Result<Vec<TensorRecord>, CheckpointError> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

/// Names of the scalar metadata tensors a model checkpoint carries in
/// addition to its parameters; they make the file self-describing.
const META_MODE: &str = "meta.conditioning_mode";
const META_SOURCE: &str = "meta.condition_source";
const META_ALPHA: &str = "meta.alpha";
const META_FEATURES: &str = "meta.features";
const META_BLOCKS: &str = "meta.blocks";

fn mode_code(mode: ConditioningMode) -> f32 {
    match mode {
        ConditioningMode::Cx => 0.0,
        ConditioningMode::Cbn => 1.0,
        ConditioningMode::None => 2.0,
    }
}

fn mode_from_code(v: f64) -> Option<ConditioningMode> {
    match v {
        x if x == 0.0 => Some(ConditioningMode::Cx),
        x if x == 1.0 => Some(ConditioningMode::Cbn),
        x if x == 2.0 => Some(ConditioningMode::None),
        _ => None,
    }
}

fn source_code(source: ConditionSource) -> f32 {
    match source {
        ConditionSource::ClassAndPatch => 0.0,
        ConditionSource::PatchOnly => 1.0,
        ConditionSource::ClassOnly => 2.0,
    }
}

fn source_from_code(v: f64) -> Option<ConditionSource> {
    match v {
        x if x == 0.0 => Some(ConditionSource::ClassAndPatch),
        x if x == 1.0 => Some(ConditionSource::PatchOnly),
        x if x == 2.0 => Some(ConditionSource::ClassOnly),
        _ => None,
    }
}

fn scalar(name: &str, value: f32) -> TensorRecord {
    TensorRecord::new(name, vec![1], vec![value])
}

/// Serialize a full reconstruction pipeline (occupancy network, class
/// embedding, patch encoder, and architecture metadata) to one file.
pub fn save_reconstructor(path: &Path, rec: &Reconstructor) -> Result<(), CheckpointError> {
    let mut records = vec![
        scalar(META_MODE, mode_code(rec.occupancy.mode())),
        scalar(META_SOURCE, source_code(rec.source)),
        scalar(META_ALPHA, rec.occupancy.alpha() as f32),
        scalar(META_FEATURES, rec.occupancy.features() as f32),
        scalar(META_BLOCKS, rec.occupancy.blocks() as f32),
    ];
    for (name, dims, data) in rec.named_state() {
        let data = data.iter().map(|&v| v as f32).collect();
        records.push(TensorRecord { name, dims, data });
    }
    write_tensor_file(path, &records)
}

fn meta_scalar(records: &[TensorRecord], name: &str) -> Result<f64, CheckpointError> {
    let r = records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| OccupancyError::MissingTensor { name: name.to_string() })?;
    if r.data.len() != 1 {
        return Err(CheckpointError::MetaInvalid { name: name.to_string(), value: f64::NAN });
    }
    Ok(r.data[0] as f64)
}

fn usize_meta(records: &[TensorRecord], name: &str) -> Result<usize, CheckpointError> {
    let v = meta_scalar(records, name)?;
    if v.fract() != 0.0 || v < 1.0 || v > 65536.0 {
        return Err(CheckpointError::MetaInvalid { name: name.to_string(), value: v });
    }
    Ok(v as usize)
}

/// Rebuild a reconstruction pipeline from a checkpoint file. The metadata
/// tensors choose the architecture; every parameter and running statistic
/// is then restored at 32-bit precision.
pub fn load_reconstructor(path: &Path) -> Result<Reconstructor, CheckpointError> {
    let records = read_tensor_file(path)?;
    let mode_v = meta_scalar(&records, META_MODE)?;
    let mode = mode_from_code(mode_v)
        .ok_or(CheckpointError::MetaInvalid { name: META_MODE.to_string(), value: mode_v })?;
    let source_v = meta_scalar(&records, META_SOURCE)?;
    let source = source_from_code(source_v)
        .ok_or(CheckpointError::MetaInvalid { name: META_SOURCE.to_string(), value: source_v })?;
    let alpha = meta_scalar(&records, META_ALPHA)?;
    let features = usize_meta(&records, META_FEATURES)?;
    let blocks = usize_meta(&records, META_BLOCKS)?;
    let mut rec = Reconstructor::with_dims(mode, source, alpha, features, blocks, 0);
    let entries: Vec<StateEntry> = records
        .into_iter()
        .filter(|r| !r.name.starts_with("meta."))
        .map(|r| (r.name, r.dims, r.data.iter().map(|&v| v as f64).collect()))
        .collect();
    rec.load_named_state(entries)?;
    Ok(rec)
}
