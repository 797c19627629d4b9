//! Native format: `<stem>.f32raw` holds little-endian f32 voxels in `xyz`
//! order, `<stem>.json` holds `{dims, spacing, kind, order, case_id?}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{mask_from_values, LoadedVolume, ValueKind, Volume, VolumeMeta};
use crate::error::{Error, Result};

pub const RAW_EXTENSION: &str = "f32raw";
const AXIS_ORDER: &str = "xyz";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: VolumeMeta,
    order: String,
}

/// `(payload, sidecar)` paths for a stem, a payload path, or a sidecar path.
pub(crate) fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some(RAW_EXTENSION) | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut payload = stem.clone().into_os_string();
    payload.push(".");
    payload.push(RAW_EXTENSION);
    let mut sidecar = stem.into_os_string();
    sidecar.push(".json");
    (payload.into(), sidecar.into())
}

pub fn read_raw(path: &Path) -> Result<(LoadedVolume, VolumeMeta)> {
    let (payload, sidecar) = raw_paths(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&sidecar, e.to_string()))?;
    if side.order != AXIS_ORDER {
        return Err(Error::format(&sidecar, format!("unsupported axis order {:?}", side.order)));
    }
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(&payload, "payload length is not a multiple of 4 bytes"));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let meta = side.meta;
    let expected: usize = meta.dims.iter().product();
    if values.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: values.len(),
        });
    }
    let vol = Volume::new(meta.dims, meta.spacing, values)?;
    let loaded = match meta.kind {
        ValueKind::Intensity => LoadedVolume::Intensity(vol),
        ValueKind::Mask => LoadedVolume::Mask(mask_from_values(&vol)?),
    };
    Ok((loaded, meta))
}

pub fn write_raw(v: &LoadedVolume, case_id: Option<&str>, path: &Path) -> Result<()> {
    let (payload, sidecar) = raw_paths(path);
    let (dims, spacing, bytes) = match v {
        LoadedVolume::Intensity(x) => (x.dims(), x.spacing(), encode(x.data().iter().copied())),
        LoadedVolume::Mask(m) => (m.dims(), m.spacing(), encode(m.data().iter().map(|&b| b as f32))),
    };
    let side = Sidecar {
        meta: VolumeMeta {
            dims,
            spacing,
            kind: v.kind(),
            case_id: case_id.map(str::to_owned),
        },
        order: AXIS_ORDER.to_owned(),
    };
    fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
    let json = serde_json::to_string_pretty(&side)?;
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

fn encode(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}
