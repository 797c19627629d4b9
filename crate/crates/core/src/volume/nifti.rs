//! Minimal single-file NIfTI-1 (`.nii`, magic `n+1`) reader and writer.
//!
//! Little-endian only, no compression, datatypes uint8, int16 and float32.
//! Masks are written as uint8 with intent name `mask`; spacing round-trips
//! through the header's f32 `pixdim`.

use std::fs;
use std::path::Path;

use super::{mask_from_values, LoadedVolume, Volume};
use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const MASK_INTENT: &[u8] = b"mask";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn read_nifti(path: &Path) -> Result<LoadedVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("{} bytes is shorter than a NIfTI-1 header", bytes.len())));
    }
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(Error::format(
            path,
            format!("sizeof_hdr is {sizeof_hdr}; only little-endian NIfTI-1 is supported"),
        ));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::format(path, "magic is not \"n+1\" (single-file NIfTI-1)"));
    }
    let rank = i16_at(&bytes, 40);
    let extent = |i: usize| i16_at(&bytes, 40 + 2 * i);
    if !(3..=7).contains(&rank) || (4..=rank as usize).any(|i| extent(i) > 1) {
        return Err(Error::format(path, format!("only 3D volumes are supported (dim[0] = {rank})")));
    }
    let mut dims = [0usize; 3];
    let mut spacing = [0f64; 3];
    for a in 0..3 {
        let d = extent(a + 1);
        if d < 1 {
            return Err(Error::format(path, format!("dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
        spacing[a] = f32_at(&bytes, 76 + 4 * (a + 1)).abs() as f64;
    }
    let datatype = i16_at(&bytes, 70);
    let vox_offset = f32_at(&bytes, 108);
    if !(vox_offset >= HEADER_LEN as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::format(path, format!("invalid vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let count: usize = dims.iter().product();
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let payload = bytes.get(start..).unwrap_or(&[]);
    if payload.len() != count * width {
        return Err(Error::SizeMismatch {
            expected: count,
            actual: payload.len() / width,
        });
    }
    let intent = &bytes[328..344];
    let is_mask = intent.starts_with(MASK_INTENT);

    if is_mask && datatype == DT_UINT8 {
        let vol = Volume::new(dims, spacing, payload.to_vec())?;
        vol.check_binary()?;
        return Ok(LoadedVolume::Mask(vol));
    }

    let mut values: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&v| v as f32).collect(),
        DT_INT16 => payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    let (slope, inter) = (f32_at(&bytes, 112), f32_at(&bytes, 116));
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let vol = Volume::new(dims, spacing, values)?;
    if is_mask {
        Ok(LoadedVolume::Mask(mask_from_values(&vol)?))
    } else {
        Ok(LoadedVolume::Intensity(vol))
    }
}

fn header(dims: [usize; 3], spacing: [f64; 3], datatype: i16, bitpix: i16, mask: bool) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        let d = i16::try_from(dims[a])
            .map_err(|_| Error::InvalidArgument(format!("extent {} exceeds NIfTI-1 limits", dims[a])))?;
        put_i16(&mut h, 42 + 2 * a, d);
    }
    for i in 4..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, spacing[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: millimetres
    h[123] = 2;
    if mask {
        h[328..328 + MASK_INTENT.len()].copy_from_slice(MASK_INTENT);
    }
    h[344..348].copy_from_slice(MAGIC);
    Ok(h)
}

pub fn write_nifti(v: &LoadedVolume, path: &Path) -> Result<()> {
    let bytes = match v {
        LoadedVolume::Intensity(x) => {
            let mut b = header(x.dims(), x.spacing(), DT_FLOAT32, 32, false)?;
            b.extend(x.data().iter().flat_map(|v| v.to_le_bytes()));
            b
        }
        LoadedVolume::Mask(m) => {
            let mut b = header(m.dims(), m.spacing(), DT_UINT8, 8, true)?;
            b.extend_from_slice(m.data());
            b
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
