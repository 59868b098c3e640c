//! Binary dataset files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "XSBD"
//!      4     4  format version (u32, currently 1)
//!      8     4  n_nuclides (u32)
//!     12     4  gridpoints per nuclide (u32)
//!     16     4  n_materials (u32)
//!     20     8  rng seed (u64)
//!     28     8  payload checksum (u64, FNV-1a over the payload bytes)
//!     36        payload:
//!               n*m points, nuclide-major, each: energy f64 then 5 xs f64
//!               n_materials nuclide counts (u32)
//!               all material nuclide IDs, material by material (u32)
//!               n_materials selection weights (f64)
//! ```
//!
//! The unionized grid is not stored; rebuild it after loading.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::grid::{Dataset, GridError, MaterialTable, NuclideGridPoint, NuclideGrids, XS_TYPES};

pub const MAGIC: [u8; 4] = *b"XSBD";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 36;

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a dataset file (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file length mismatch: header implies {expected} bytes, file has {found}")]
    Length { expected: u64, found: u64 },
    #[error("payload checksum mismatch: header {expected:016x}, computed {found:016x}")]
    Checksum { expected: u64, found: u64 },
    #[error("dataset too large for this format: {0}")]
    TooLarge(String),
    #[error("invalid dataset contents: {0}")]
    Invalid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetFileHeader {
    pub format_version: u32,
    pub n_nuclides: u32,
    pub gridpoints_per_nuclide: u32,
    pub n_materials: u32,
    pub rng_seed: u64,
    pub payload_checksum: u64,
}

impl DatasetFileHeader {
    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&self.format_version.to_le_bytes());
        b[8..12].copy_from_slice(&self.n_nuclides.to_le_bytes());
        b[12..16].copy_from_slice(&self.gridpoints_per_nuclide.to_le_bytes());
        b[16..20].copy_from_slice(&self.n_materials.to_le_bytes());
        b[20..28].copy_from_slice(&self.rng_seed.to_le_bytes());
        b[28..36].copy_from_slice(&self.payload_checksum.to_le_bytes());
        b
    }

    /// Parses and checks magic and version.
    pub fn parse(bytes: &[u8]) -> Result<Self, DatasetIoError> {
        if bytes.len() < 4 || bytes[0..4] != MAGIC {
            let mut m = [0u8; 4];
            let n = bytes.len().min(4);
            m[..n].copy_from_slice(&bytes[..n]);
            return Err(DatasetIoError::BadMagic(m));
        }
        if bytes.len() < HEADER_LEN {
            return Err(DatasetIoError::Length {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let format_version = u32_at(4);
        if format_version != FORMAT_VERSION {
            return Err(DatasetIoError::UnsupportedVersion(format_version));
        }
        Ok(Self {
            format_version,
            n_nuclides: u32_at(8),
            gridpoints_per_nuclide: u32_at(12),
            n_materials: u32_at(16),
            rng_seed: u64_at(20),
            payload_checksum: u64_at(28),
        })
    }
}

/// FNV-1a, 64-bit.
pub fn payload_checksum(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn encode_payload(ds: &Dataset) -> Vec<u8> {
    let mats = &ds.materials;
    let ids: usize = mats.mats().iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(
        ds.grids.points().len() * (1 + XS_TYPES) * 8 + mats.n_materials() * 12 + ids * 4,
    );
    for p in ds.grids.points() {
        out.extend_from_slice(&p.energy.to_le_bytes());
        for x in p.xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for m in mats.mats() {
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    }
    for &id in mats.mats().iter().flatten() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for w in mats.selection_weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

/// Full file image of `ds`.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, DatasetIoError> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| DatasetIoError::TooLarge(format!("{what} = {v}")))
    };
    let payload = encode_payload(ds);
    let header = DatasetFileHeader {
        format_version: FORMAT_VERSION,
        n_nuclides: to_u32(ds.grids.n_nuclides(), "n_nuclides")?,
        gridpoints_per_nuclide: to_u32(ds.grids.gridpoints(), "gridpoints")?,
        n_materials: to_u32(ds.materials.n_materials(), "n_materials")?,
        rng_seed: ds.rng_seed,
        payload_checksum: payload_checksum(&payload),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a full file image. Nothing is returned unless every check passes.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatasetIoError> {
    let h = DatasetFileHeader::parse(bytes)?;
    let (n, m, nm) = (
        h.n_nuclides as u64,
        h.gridpoints_per_nuclide as u64,
        h.n_materials as u64,
    );
    let found = bytes.len() as u64;
    let grids_len = n * m * (1 + XS_TYPES as u64) * 8;
    let counts_end = HEADER_LEN as u64 + grids_len + nm * 4;
    if found < counts_end + nm * 8 {
        return Err(DatasetIoError::Length {
            expected: counts_end + nm * 8,
            found,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let computed = payload_checksum(payload);
    if computed != h.payload_checksum {
        return Err(DatasetIoError::Checksum {
            expected: h.payload_checksum,
            found: computed,
        });
    }

    let mut cur = Cursor { buf: payload, pos: 0 };
    let points: Vec<NuclideGridPoint> = (0..n * m)
        .map(|_| {
            let energy = cur.f64();
            let mut xs = [0.0; XS_TYPES];
            for x in &mut xs {
                *x = cur.f64();
            }
            NuclideGridPoint { energy, xs }
        })
        .collect();
    let counts: Vec<u64> = (0..nm).map(|_| u64::from(cur.u32())).collect();
    let total_ids: u64 = counts.iter().sum();
    let expected = counts_end + total_ids * 4 + nm * 8;
    if found != expected {
        return Err(DatasetIoError::Length { expected, found });
    }
    let mats: Vec<Vec<u32>> = counts.iter().map(|&c| (0..c).map(|_| cur.u32()).collect()).collect();
    let weights: Vec<f64> = (0..nm).map(|_| cur.f64()).collect();

    let grids = NuclideGrids::from_flat(n as usize, m as usize, points)?;
    let materials = MaterialTable::new(mats, weights)?;
    Ok(Dataset::new(grids, materials)?.with_seed(h.rng_seed))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let b = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        b
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<(), DatasetIoError> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|source| DatasetIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads and validates a dataset file. The calling worker is the only one
/// that touches the returned buffers.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DatasetIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_dataset(&bytes)
}
