//! Gzip-compressed NIfTI-1 volume reading and writing.
//!
//! Only the subset needed here is supported: 3-dimensional FLOAT32 image
//! volumes and UINT8/INT16 label volumes, little-endian, with spacing taken
//! from `pixdim`. The parser enforces hard size caps so that corrupt or
//! hostile headers cannot trigger huge allocations.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{BiglError, Result};

const HEADER_LEN: usize = 348;
const MAGIC_OFFSET: usize = 344;
/// Largest per-axis extent the reader accepts.
pub const MAX_DIM: usize = 4096;
/// Largest total element count the reader accepts (16 Mi elements = 64 MiB
/// of f32); full-resolution challenge volumes are ~9 Mi voxels.
pub const MAX_ELEMS: usize = 1 << 24;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Axis-ordered voxel spacing in mm: (x, y, z) matching (width, height,
/// depth).
pub type SpacingXyz = (f64, f64, f64);

/// A decoded volume: data indexed `[z, y, x]` (depth, height, width).
#[derive(Clone, Debug, PartialEq)]
pub enum Decoded {
    F32(Array3<f32>, SpacingXyz),
    Labels(Array3<i64>, SpacingXyz),
}

fn ingest(msg: impl Into<String>) -> BiglError {
    BiglError::IngestError(msg.into())
}

fn read_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn read_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Parse a gzip-compressed NIfTI-1 byte stream.
pub fn parse_volume_bytes(bytes: &[u8]) -> Result<Decoded> {
    let mut dec = GzDecoder::new(bytes);
    let mut header = [0u8; HEADER_LEN];
    dec.read_exact(&mut header).map_err(|e| ingest(format!("short header: {e}")))?;

    let sizeof_hdr = i32::from_le_bytes([header[0], header[1], header[2], header[3]]);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(ingest(format!("bad header size {sizeof_hdr}")));
    }
    if &header[MAGIC_OFFSET..MAGIC_OFFSET + 4] != b"n+1\0" {
        return Err(ingest("bad magic"));
    }
    let ndim = read_i16(&header, 40);
    if ndim != 3 {
        return Err(ingest(format!("expected 3 dimensions, header says {ndim}")));
    }
    let w = read_i16(&header, 42);
    let h = read_i16(&header, 44);
    let d = read_i16(&header, 46);
    if w <= 0 || h <= 0 || d <= 0 {
        return Err(ingest(format!("non-positive extent {w}x{h}x{d}")));
    }
    let (w, h, d) = (w as usize, h as usize, d as usize);
    if w > MAX_DIM || h > MAX_DIM || d > MAX_DIM {
        return Err(ingest(format!("extent {w}x{h}x{d} exceeds per-axis cap {MAX_DIM}")));
    }
    let elems = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| ingest("extent overflow"))?;
    if elems > MAX_ELEMS {
        return Err(ingest(format!("element count {elems} exceeds cap {MAX_ELEMS}")));
    }
    let datatype = read_i16(&header, 70);
    let bitpix = read_i16(&header, 72);
    let expected_bitpix = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        other => return Err(ingest(format!("unsupported datatype {other}"))),
    };
    if bitpix != expected_bitpix {
        return Err(ingest(format!("datatype {datatype} with bitpix {bitpix}")));
    }
    let sx = read_f32(&header, 80) as f64;
    let sy = read_f32(&header, 84) as f64;
    let sz = read_f32(&header, 88) as f64;
    if !(sx.is_finite() && sy.is_finite() && sz.is_finite()) || sx <= 0.0 || sy <= 0.0 || sz <= 0.0
    {
        return Err(ingest(format!("non-positive spacing ({sx}, {sy}, {sz})")));
    }
    let vox_offset = read_f32(&header, 108);
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 || vox_offset > 4096.0 {
        return Err(ingest(format!("bad voxel offset {vox_offset}")));
    }
    let skip = vox_offset as usize - HEADER_LEN;
    let mut gap = vec![0u8; skip];
    dec.read_exact(&mut gap).map_err(|e| ingest(format!("short offset gap: {e}")))?;

    let bytes_per = (expected_bitpix / 8) as usize;
    let mut payload = vec![0u8; elems * bytes_per];
    dec.read_exact(&mut payload).map_err(|e| ingest(format!("short voxel data: {e}")))?;

    let spacing = (sx, sy, sz);
    match datatype {
        DT_FLOAT32 => {
            let mut out = Vec::with_capacity(elems);
            for c in payload.chunks_exact(4) {
                out.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            }
            let arr = Array3::from_shape_vec((d, h, w), out).unwrap();
            Ok(Decoded::F32(arr, spacing))
        }
        DT_UINT8 => {
            let out: Vec<i64> = payload.iter().map(|&v| v as i64).collect();
            let arr = Array3::from_shape_vec((d, h, w), out).unwrap();
            Ok(Decoded::Labels(arr, spacing))
        }
        DT_INT16 => {
            let out: Vec<i64> = payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as i64)
                .collect();
            let arr = Array3::from_shape_vec((d, h, w), out).unwrap();
            Ok(Decoded::Labels(arr, spacing))
        }
        _ => unreachable!(),
    }
}

fn build_header(w: usize, h: usize, d: usize, datatype: i16, bitpix: i16, spacing: SpacingXyz) -> [u8; HEADER_LEN] {
    let mut hd = [0u8; HEADER_LEN];
    hd[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    hd[40..42].copy_from_slice(&3i16.to_le_bytes());
    hd[42..44].copy_from_slice(&(w as i16).to_le_bytes());
    hd[44..46].copy_from_slice(&(h as i16).to_le_bytes());
    hd[46..48].copy_from_slice(&(d as i16).to_le_bytes());
    for off in [48, 50, 52, 54] {
        hd[off..off + 2].copy_from_slice(&1i16.to_le_bytes());
    }
    hd[70..72].copy_from_slice(&datatype.to_le_bytes());
    hd[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0] = 1 (qfac), then x/y/z spacing
    hd[76..80].copy_from_slice(&1f32.to_le_bytes());
    hd[80..84].copy_from_slice(&(spacing.0 as f32).to_le_bytes());
    hd[84..88].copy_from_slice(&(spacing.1 as f32).to_le_bytes());
    hd[88..92].copy_from_slice(&(spacing.2 as f32).to_le_bytes());
    hd[108..112].copy_from_slice(&352f32.to_le_bytes());
    // scl_slope = 1, scl_inter = 0
    hd[112..116].copy_from_slice(&1f32.to_le_bytes());
    // sform: diagonal spacing
    hd[254..256].copy_from_slice(&1i16.to_le_bytes());
    hd[280..284].copy_from_slice(&(spacing.0 as f32).to_le_bytes());
    hd[300..304].copy_from_slice(&(spacing.1 as f32).to_le_bytes());
    hd[320..324].copy_from_slice(&(spacing.2 as f32).to_le_bytes());
    hd[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");
    hd
}

fn encode(header: [u8; HEADER_LEN], payload: &[u8]) -> Result<Vec<u8>> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(&header).map_err(BiglError::Io)?;
    enc.write_all(&[0u8; 4]).map_err(BiglError::Io)?; // pad to vox_offset 352
    enc.write_all(payload).map_err(BiglError::Io)?;
    enc.finish().map_err(BiglError::Io)
}

/// Serialize an image volume (indexed `[z, y, x]`) to gzip NIfTI-1 bytes.
pub fn encode_volume_f32(data: &Array3<f32>, spacing: SpacingXyz) -> Result<Vec<u8>> {
    let (d, h, w) = data.dim();
    let mut payload = Vec::with_capacity(d * h * w * 4);
    for &v in data.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    encode(build_header(w, h, d, DT_FLOAT32, 32, spacing), &payload)
}

/// Serialize a label volume (values must fit u8) to gzip NIfTI-1 bytes.
pub fn encode_volume_u8(data: &Array3<u8>, spacing: SpacingXyz) -> Result<Vec<u8>> {
    let (d, h, w) = data.dim();
    let payload: Vec<u8> = data.iter().copied().collect();
    encode(build_header(w, h, d, DT_UINT8, 8, spacing), &payload)
}

pub fn write_volume_f32(path: &Path, data: &Array3<f32>, spacing: SpacingXyz) -> Result<()> {
    std::fs::write(path, encode_volume_f32(data, spacing)?).map_err(BiglError::Io)
}

pub fn write_volume_u8(path: &Path, data: &Array3<u8>, spacing: SpacingXyz) -> Result<()> {
    std::fs::write(path, encode_volume_u8(data, spacing)?).map_err(BiglError::Io)
}

fn read_file(path: &Path) -> Result<Decoded> {
    let bytes = std::fs::read(path)
        .map_err(|e| ingest(format!("cannot read {}: {e}", path.display())))?;
    parse_volume_bytes(&bytes).map_err(|e| ingest(format!("{}: {e}", path.display())))
}

/// Read an image volume; label-typed files are rejected.
pub fn read_volume_f32(path: &Path) -> Result<(Array3<f32>, SpacingXyz)> {
    match read_file(path)? {
        Decoded::F32(a, s) => Ok((a, s)),
        Decoded::Labels(..) => Err(ingest(format!(
            "{}: expected a float image volume, found integer labels",
            path.display()
        ))),
    }
}

/// Read a label volume; float-typed files are rejected.
pub fn read_volume_labels(path: &Path) -> Result<(Array3<i64>, SpacingXyz)> {
    match read_file(path)? {
        Decoded::Labels(a, s) => Ok((a, s)),
        Decoded::F32(..) => Err(ingest(format!(
            "{}: expected integer labels, found a float image volume",
            path.display()
        ))),
    }
}
