//! Single-file NIfTI-1 reading and writing.
//!
//! Supported subset: 348-byte header with magic "n+1\0", data in the same
//! file, datatypes uint8/int16/uint16/float32/float64, optional gzip
//! wrapping on read. Byte order is auto-detected from the sizeof_hdr
//! field. Everything else (NIfTI-2, .hdr/.img pairs, extensions) is out
//! of scope.

use super::{Affine, Result, VolioError, Volume3D};
use byteorder::{ByteOrder, LittleEndian};
use std::io::Read;
use std::path::Path;

const HEADER_LEN: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";

const OFF_SIZEOF_HDR: usize = 0;
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW_X: usize = 280;
const OFF_SROW_Y: usize = 296;
const OFF_SROW_Z: usize = 312;
const OFF_MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

#[inline]
fn get_i16(bytes: &[u8], off: usize, swap: bool) -> i16 {
    let b = [bytes[off], bytes[off + 1]];
    if swap { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
}

#[inline]
fn get_i32(bytes: &[u8], off: usize, swap: bool) -> i32 {
    let b = [bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]];
    if swap { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }
}

#[inline]
fn get_f32(bytes: &[u8], off: usize, swap: bool) -> f32 {
    let b = [bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]];
    if swap { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let io_err = |source| VolioError::IoFailure { path: path.to_path_buf(), source };
    let raw = std::fs::read(path).map_err(io_err)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads a single-file NIfTI-1 volume (optionally gzipped).
///
/// Intensities are scaled to float32 via scl_slope/scl_inter (slope 0
/// treated as 1, NaN slope/intercept ignored). Non-positive or non-finite
/// pixdim entries fall back to 1.0 spacing. The affine is taken from the
/// sform rows when sform_code > 0.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = read_file_bytes(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(VolioError::BadMagic);
    }
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(VolioError::BadMagic);
    }
    let swap = if get_i32(&bytes, OFF_SIZEOF_HDR, false) == HEADER_LEN as i32 {
        false
    } else if get_i32(&bytes, OFF_SIZEOF_HDR, true) == HEADER_LEN as i32 {
        true
    } else {
        return Err(VolioError::BadMagic);
    };

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = get_i16(&bytes, OFF_DIM + 2 * i, swap);
    }
    let mut ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(VolioError::DimUnsupported(ndim));
    }
    while ndim > 3 && dim[ndim as usize] == 1 {
        ndim -= 1;
    }
    if ndim != 3 {
        return Err(VolioError::DimUnsupported(ndim));
    }
    if dim[1] < 1 || dim[2] < 1 || dim[3] < 1 {
        return Err(VolioError::DimUnsupported(ndim));
    }
    let dims = (dim[1] as usize, dim[2] as usize, dim[3] as usize);
    let count = dims.0 * dims.1 * dims.2;

    let datatype = get_i16(&bytes, OFF_DATATYPE, swap);
    let bytes_per_voxel = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(VolioError::UnsupportedDatatype(other)),
    };

    let vox_offset = get_f32(&bytes, OFF_VOX_OFFSET, swap);
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 {
        return Err(VolioError::BadMagic);
    }
    let data_start = vox_offset as usize;
    let expected = count * bytes_per_voxel;
    let found = bytes.len().saturating_sub(data_start);
    if found < expected {
        return Err(VolioError::Truncated { expected, found });
    }
    let data_bytes = &bytes[data_start..data_start + expected];

    let mut slope = get_f32(&bytes, OFF_SCL_SLOPE, swap);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let mut inter = get_f32(&bytes, OFF_SCL_INTER, swap);
    if !inter.is_finite() {
        inter = 0.0;
    }
    let (slope64, inter64) = (f64::from(slope), f64::from(inter));
    let scale = |raw: f64| (raw * slope64 + inter64) as f32;

    let mut data = Vec::with_capacity(count);
    match datatype {
        DT_UINT8 => data.extend(data_bytes.iter().map(|b| scale(f64::from(*b)))),
        DT_INT16 => data.extend(data_bytes.chunks_exact(2).map(|c| {
            let raw = if swap {
                i16::from_be_bytes([c[0], c[1]])
            } else {
                i16::from_le_bytes([c[0], c[1]])
            };
            scale(f64::from(raw))
        })),
        DT_UINT16 => data.extend(data_bytes.chunks_exact(2).map(|c| {
            let raw = if swap {
                u16::from_be_bytes([c[0], c[1]])
            } else {
                u16::from_le_bytes([c[0], c[1]])
            };
            scale(f64::from(raw))
        })),
        DT_FLOAT32 => data.extend(data_bytes.chunks_exact(4).map(|c| {
            let raw = if swap {
                f32::from_be_bytes([c[0], c[1], c[2], c[3]])
            } else {
                f32::from_le_bytes([c[0], c[1], c[2], c[3]])
            };
            scale(f64::from(raw))
        })),
        DT_FLOAT64 => data.extend(data_bytes.chunks_exact(8).map(|c| {
            let raw = if swap {
                f64::from_be_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
            } else {
                f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
            };
            scale(raw)
        })),
        _ => unreachable!("datatype validated above"),
    }

    let sanitize = |p: f32| if p.is_finite() && p > 0.0 { p } else { 1.0 };
    let spacing = (
        sanitize(get_f32(&bytes, OFF_PIXDIM + 4, swap)),
        sanitize(get_f32(&bytes, OFF_PIXDIM + 8, swap)),
        sanitize(get_f32(&bytes, OFF_PIXDIM + 12, swap)),
    );

    let affine = if get_i16(&bytes, OFF_SFORM_CODE, swap) > 0 {
        let mut a: Affine = [[0.0; 4]; 4];
        for (row, base) in [(0, OFF_SROW_X), (1, OFF_SROW_Y), (2, OFF_SROW_Z)] {
            for col in 0..4 {
                a[row][col] = get_f32(&bytes, base + 4 * col, swap);
            }
        }
        a[3] = [0.0, 0.0, 0.0, 1.0];
        Some(a)
    } else {
        None
    };

    let mut vol = Volume3D::new(data, dims, spacing, affine)?;
    vol.intensity_slope = slope;
    vol.intensity_intercept = inter;
    Ok(vol)
}

/// Writes a volume as single-file NIfTI-1: float32 little-endian, data at
/// offset 352, sform affine set (falling back to a spacing-scaled identity).
pub fn write_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (nx, ny, nz) = vol.dims();
    let mut header = vec![0u8; HEADER_LEN + 4];
    LittleEndian::write_i32(&mut header[OFF_SIZEOF_HDR..], HEADER_LEN as i32);
    header[38] = b'r';
    let dim: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut header[OFF_DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut header[OFF_DATATYPE..], DT_FLOAT32);
    LittleEndian::write_i16(&mut header[OFF_BITPIX..], 32);
    let pixdim: [f32; 8] = [1.0, vol.spacing.0, vol.spacing.1, vol.spacing.2, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut header[OFF_PIXDIM + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut header[OFF_VOX_OFFSET..], (HEADER_LEN + 4) as f32);
    LittleEndian::write_f32(&mut header[OFF_SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut header[OFF_SCL_INTER..], 0.0);
    header[OFF_XYZT_UNITS] = 2;
    LittleEndian::write_i16(&mut header[OFF_QFORM_CODE..], 0);
    LittleEndian::write_i16(&mut header[OFF_SFORM_CODE..], 1);
    let affine = vol.affine.unwrap_or([
        [vol.spacing.0, 0.0, 0.0, 0.0],
        [0.0, vol.spacing.1, 0.0, 0.0],
        [0.0, 0.0, vol.spacing.2, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);
    for (row, base) in [(0, OFF_SROW_X), (1, OFF_SROW_Y), (2, OFF_SROW_Z)] {
        for col in 0..4 {
            LittleEndian::write_f32(&mut header[base + 4 * col..], affine[row][col]);
        }
    }
    header[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);

    let mut body = header;
    body.reserve(vol.data().len() * 4);
    for v in vol.data() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, body)
        .map_err(|source| VolioError::IoFailure { path: path.to_path_buf(), source })
}
