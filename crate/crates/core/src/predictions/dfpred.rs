//! DFPRED binary prediction files.
//!
//! Layout (little endian): `"DFPR"`, u32 version = 1, u32 width, u32 height,
//! u32 channel count = 6, u32 source focal in millipixels, then six planar
//! row-major f32 channels in [`CHANNELS`](super::CHANNELS) order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::geometry::Raster;

use super::{PredictionError, PredictionSet, CHANNELS};

pub const MAGIC: [u8; 4] = *b"DFPR";
pub const VERSION: u32 = 1;
pub const CHANNEL_COUNT: u32 = 6;
pub const HEADER_LEN: usize = 24;

impl PredictionSet {
    /// The set as it reads back from a DFPRED file: values rounded to f32,
    /// focal rounded to millipixels.
    pub fn representable(&self) -> PredictionSet {
        let q = |r: &Raster<f64>| r.map(|&v| v as f32 as f64);
        PredictionSet {
            log_depth: q(&self.log_depth),
            log_depth_var: q(&self.log_depth_var),
            grad_x: q(&self.grad_x),
            grad_x_var: q(&self.grad_x_var),
            grad_y: q(&self.grad_y),
            grad_y_var: q(&self.grad_y_var),
            source_focal: focal_millipixels(self.source_focal) as f64 / 1000.0,
        }
    }
}

fn focal_millipixels(f: f64) -> u32 {
    (f * 1000.0).round().clamp(0.0, u32::MAX as f64) as u32
}

/// Serialises a validated set.
pub fn write_predictions(p: &PredictionSet) -> Result<Vec<u8>, PredictionError> {
    p.validate()?;
    let n = p.log_depth.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + 6 * 4 * n);
    buf.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        p.width() as u32,
        p.height() as u32,
        CHANNEL_COUNT,
        focal_millipixels(p.source_focal),
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for r in p.channels() {
        for &v in r.values() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_predictions(p: &PredictionSet, path: impl AsRef<Path>) -> Result<(), PredictionError> {
    let path = path.as_ref();
    let bytes = write_predictions(p)?;
    let io = |source| PredictionError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize, field: &'static str) -> Result<u32, PredictionError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(PredictionError::TruncatedFile { field, offset })
}

/// Parses and validates a DFPRED byte buffer.
pub fn read_predictions(bytes: &[u8]) -> Result<PredictionSet, PredictionError> {
    let magic: [u8; 4] = bytes
        .get(0..4)
        .ok_or(PredictionError::TruncatedFile {
            field: "magic",
            offset: 0,
        })?
        .try_into()
        .expect("slice of length 4");
    if magic != MAGIC {
        return Err(PredictionError::BadMagic { found: magic });
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != VERSION {
        return Err(PredictionError::UnsupportedVersion { version });
    }
    let width = read_u32(bytes, 8, "width")? as usize;
    let height = read_u32(bytes, 12, "height")? as usize;
    let channels = read_u32(bytes, 16, "channel_count")?;
    let focal_mpx = read_u32(bytes, 20, "source_focal_millipixels")?;
    if width == 0 || height == 0 {
        return Err(PredictionError::DimensionMismatch {
            field: if width == 0 { "width" } else { "height" },
            offset: if width == 0 { 8 } else { 12 },
            detail: format!("empty raster {width}x{height}"),
        });
    }
    if channels != CHANNEL_COUNT {
        return Err(PredictionError::DimensionMismatch {
            field: "channel_count",
            offset: 16,
            detail: format!("expected {CHANNEL_COUNT} channels, found {channels}"),
        });
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| PredictionError::DimensionMismatch {
            field: "height",
            offset: 12,
            detail: format!("{width}x{height} overflows"),
        })?;
    let mut planes: Vec<Raster<f64>> = Vec::with_capacity(6);
    for (c, name) in CHANNELS.iter().enumerate() {
        let start = HEADER_LEN + c * n * 4;
        let end = start + n * 4;
        if bytes.len() < end {
            return Err(PredictionError::TruncatedFile {
                field: name,
                offset: bytes.len().max(start),
            });
        }
        let values = bytes[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        planes.push(Raster::from_vec(width, height, values).expect("length checked"));
    }
    if bytes.len() > HEADER_LEN + 6 * n * 4 {
        return Err(PredictionError::DimensionMismatch {
            field: "grad_y_var",
            offset: HEADER_LEN + 6 * n * 4,
            detail: format!("{} trailing bytes", bytes.len() - HEADER_LEN - 6 * n * 4),
        });
    }
    let mut it = planes.into_iter();
    let mut next = || it.next().expect("six planes");
    let set = PredictionSet {
        log_depth: next(),
        log_depth_var: next(),
        grad_x: next(),
        grad_x_var: next(),
        grad_y: next(),
        grad_y_var: next(),
        source_focal: focal_mpx as f64 / 1000.0,
    };
    set.validate()?;
    Ok(set)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionSet, PredictionError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PredictionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_predictions(&bytes)
}
