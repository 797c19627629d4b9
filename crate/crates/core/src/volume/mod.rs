//! Volumetric scalar fields, label masks, and their on-disk formats.
//!
//! Voxels are stored with `x` fastest, then `y`, then `z`:
//! `index = x + W * (y + H * z)`.

mod nifti;
mod raw;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, shape_err, Error, Result};

pub use nifti::{read_nifti, write_nifti};
pub use raw::{read_raw, write_raw, RAW_EXTENSION};

/// Default intensity window for CT preprocessing.
pub const HU_LOW: f32 = -100.0;
pub const HU_HIGH: f32 = 240.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// Intensity volume (CT, in Hounsfield units before preprocessing).
pub type CtVolume = Volume<f32>;
/// Binary mask; every voxel is 0 or 1.
pub type LabelVolume = Volume<u8>;
/// Per-voxel foreground probability in `[0, 1]`.
pub type ProbabilityVolume = Volume<f32>;

impl<T: Copy> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(invalid_arg!("volume dims must be positive, got {:?}", dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid_arg!("voxel spacing must be positive, got {:?}", spacing));
        }
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Same geometry, new payload.
    pub fn with_data<U: Copy>(&self, data: Vec<U>) -> Result<Volume<U>> {
        Volume::new(self.dims, self.spacing, data)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the box starting at `origin` with extent `size`.
    pub fn extract(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume<T>> {
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] || size[a] == 0 {
                return Err(shape_err!(
                    "region {:?}+{:?} outside volume {:?}",
                    origin,
                    size,
                    self.dims
                ));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[2] {
            for y in 0..size[1] {
                let start = self.index(origin[0], origin[1] + y, origin[2] + z);
                data.extend_from_slice(&self.data[start..start + size[0]]);
            }
        }
        Volume::new(size, self.spacing, data)
    }

    /// Writes `src` into this volume at `origin`.
    pub fn paste(&mut self, origin: [usize; 3], src: &Volume<T>) -> Result<()> {
        let size = src.dims;
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] {
                return Err(shape_err!(
                    "paste of {:?} at {:?} outside volume {:?}",
                    size,
                    origin,
                    self.dims
                ));
            }
        }
        for z in 0..size[2] {
            for y in 0..size[1] {
                let dst = self.index(origin[0], origin[1] + y, origin[2] + z);
                let s = src.index(0, y, z);
                self.data[dst..dst + size[0]].copy_from_slice(&src.data[s..s + size[0]]);
            }
        }
        Ok(())
    }

    /// Pads symmetrically with `fill` so every axis reaches at least `min`.
    /// Returns the padded volume and the offset of the original inside it.
    pub fn pad_to_min(&self, min: [usize; 3], fill: T) -> (Volume<T>, [usize; 3]) {
        let mut dims = self.dims;
        let mut offset = [0; 3];
        for a in 0..3 {
            if dims[a] < min[a] {
                offset[a] = (min[a] - dims[a]) / 2;
                dims[a] = min[a];
            }
        }
        if dims == self.dims {
            return (self.clone(), offset);
        }
        let mut out = Volume {
            dims,
            spacing: self.spacing,
            data: vec![fill; dims.iter().product()],
        };
        out.paste(offset, self).expect("padded volume contains the original");
        (out, offset)
    }

    pub fn same_dims<U>(&self, other: &Volume<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("volume dims {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }
}

impl LabelVolume {
    /// Validates that every voxel is 0 or 1.
    pub fn check_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v > 1) {
            Some(i) => Err(invalid_arg!("mask voxel {i} has value {}", self.data[i])),
            None => Ok(()),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Intensity,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LoadedVolume {
    Intensity(CtVolume),
    Mask(LabelVolume),
}

impl LoadedVolume {
    pub fn kind(&self) -> ValueKind {
        match self {
            LoadedVolume::Intensity(_) => ValueKind::Intensity,
            LoadedVolume::Mask(_) => ValueKind::Mask,
        }
    }

    pub fn into_intensity(self) -> CtVolume {
        match self {
            LoadedVolume::Intensity(v) => v,
            LoadedVolume::Mask(m) => m.map(f32::from),
        }
    }

    pub fn into_mask(self) -> Result<LabelVolume> {
        match self {
            LoadedVolume::Mask(m) => Ok(m),
            LoadedVolume::Intensity(v) => mask_from_values(&v),
        }
    }
}

fn mask_from_values(v: &CtVolume) -> Result<LabelVolume> {
    let mut data = Vec::with_capacity(v.len());
    for (i, &x) in v.data().iter().enumerate() {
        data.push(match x {
            x if x == 0.0 => 0,
            x if x == 1.0 => 1,
            _ => return Err(invalid_arg!("voxel {i} has non-binary value {x}")),
        });
    }
    v.with_data(data)
}

fn is_nifti(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}

/// Loads either format, chosen by extension: `.nii` is NIfTI-1, anything else
/// resolves to a `<stem>.f32raw` payload plus `<stem>.json` sidecar.
pub fn load_volume(path: impl AsRef<Path>) -> Result<LoadedVolume> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(invalid_arg!("empty path"));
    }
    if is_nifti(path) {
        read_nifti(path)
    } else {
        read_raw(path).map(|(v, _)| v)
    }
}

pub fn load_intensity(path: impl AsRef<Path>) -> Result<CtVolume> {
    load_volume(path).map(LoadedVolume::into_intensity)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelVolume> {
    load_volume(path)?.into_mask()
}

pub fn save_volume(v: &LoadedVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(invalid_arg!("empty path"));
    }
    if is_nifti(path) {
        write_nifti(v, path)
    } else {
        write_raw(v, None, path)
    }
}

pub fn save_intensity(v: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&LoadedVolume::Intensity(v.clone()), path)
}

pub fn save_mask(m: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&LoadedVolume::Mask(m.clone()), path)
}

/// Clamps every voxel to `[lo, hi]`.
pub fn truncate_intensity(v: &CtVolume, lo: f32, hi: f32) -> Result<CtVolume> {
    if !(lo < hi) {
        return Err(invalid_arg!("truncation bounds need lo < hi, got [{lo}, {hi}]"));
    }
    Ok(v.map(|x| x.clamp(lo, hi)))
}

/// Rescales a case to zero mean and unit population variance; a constant case
/// maps to all zeros.
pub fn normalize_zero_mean_unit_var(v: &CtVolume) -> CtVolume {
    let n = v.len() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data()
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return v.map(|_| 0.0);
    }
    let inv = 1.0 / var.sqrt();
    v.map(|x| ((x as f64 - mean) * inv) as f32)
}

/// Truncation to the default window followed by per-case standardisation.
pub fn preprocess(v: &CtVolume) -> CtVolume {
    let t = truncate_intensity(v, HU_LOW, HU_HIGH).expect("default window is ordered");
    normalize_zero_mean_unit_var(&t)
}
