//! Synthetic CT-like cases: a randomly placed, randomly oriented ellipsoid
//! brighter than a smoothly varying, noisy background.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::rng::{stream, Purpose};
use crate::volume::{save_intensity, save_mask, CtVolume, LabelVolume, Volume};

/// Foreground fraction band for generated masks.
pub const OCCUPANCY: (f64, f64) = (0.005, 0.03);

const BACKGROUND_HU: f64 = 40.0;
const BACKGROUND_SWING: f64 = 30.0;
const ORGAN_OFFSET: f64 = 90.0;
const NOISE_SIGMA: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCase {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub occupancy: f64,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

fn unit_quaternion_matrix(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in &mut q {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn ellipsoid_mask(dims: [usize; 3], rng: &mut impl Rng) -> LabelVolume {
    let total = dims.iter().product::<usize>() as f64;
    let target = rng.random_range(0.008..0.025) * total;
    let ratios = [0, 1, 2].map(|_| rng.random_range(0.7..1.4f64));
    let scale = (3.0 * target / (4.0 * std::f64::consts::PI * ratios.iter().product::<f64>())).cbrt();
    let semi = ratios.map(|r| r * scale);
    let rot = unit_quaternion_matrix(rng);
    let reach = semi.iter().copied().fold(0.0, f64::max) + 1.0;
    let center = [0, 1, 2].map(|a| {
        let lo = reach.min(dims[a] as f64 / 2.0);
        let hi = (dims[a] as f64 - 1.0 - reach).max(lo);
        rng.random_range(lo..=hi)
    });
    let mut data = Vec::with_capacity(total as usize);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
                let mut r = 0.0;
                for (row, s) in rot.iter().zip(semi) {
                    let u = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
                    r += (u / s).powi(2);
                }
                data.push((r <= 1.0) as u8);
            }
        }
    }
    Volume::new(dims, [1.0; 3], data).expect("sized by construction")
}

/// Low-frequency field in `[-1, 1]` from a few random plane waves.
fn smooth_field(dims: [usize; 3], rng: &mut impl Rng) -> Vec<f64> {
    let waves: Vec<([f64; 3], f64)> = (0..4)
        .map(|_| {
            let k = [0, 1, 2].map(|a| rng.random_range(-2.0..2.0) * std::f64::consts::TAU / dims[a] as f64);
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let s: f64 = waves
                    .iter()
                    .map(|(k, phase)| (k[0] * x as f64 + k[1] * y as f64 + k[2] * z as f64 + phase).cos())
                    .sum();
                out.push(s / waves.len() as f64);
            }
        }
    }
    out
}

/// Case `index` of the dataset drawn from `seed`, in Hounsfield-like units.
pub fn synth_case(dims: [usize; 3], seed: u64, index: usize) -> Result<(CtVolume, LabelVolume)> {
    if dims.iter().any(|&d| d < 32) {
        return Err(invalid_arg!("synthetic volumes need at least 32 voxels per axis, got {dims:?}"));
    }
    let mut rng = stream(seed, Purpose::Synth, index as u64, 0);
    let total = dims.iter().product::<usize>() as f64;
    let mask = loop {
        let m = ellipsoid_mask(dims, &mut rng);
        let occ = m.count() as f64 / total;
        if (OCCUPANCY.0..=OCCUPANCY.1).contains(&occ) {
            break m;
        }
    };
    let field = smooth_field(dims, &mut rng);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let data = field
        .iter()
        .zip(mask.data())
        .map(|(&f, &m)| {
            let v = BACKGROUND_HU + BACKGROUND_SWING * f + ORGAN_OFFSET * m as f64 + noise.sample(&mut rng);
            v as f32
        })
        .collect();
    Ok((mask.with_data(data)?, mask))
}

/// Writes `count` cases as `<id>_image.nii` / `<id>_label.nii` under `dir`.
pub fn generate_synthetic(count: usize, dims: [usize; 3], seed: u64, dir: &Path) -> Result<Vec<SynthCase>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (image, label) = synth_case(dims, seed, i)?;
        let id = case_id(i);
        let image_path = dir.join(format!("{id}_image.nii"));
        let label_path = dir.join(format!("{id}_label.nii"));
        save_intensity(&image, &image_path)?;
        save_mask(&label, &label_path)?;
        out.push(SynthCase {
            occupancy: label.count() as f64 / label.len() as f64,
            id,
            image: image_path,
            label: label_path,
        });
    }
    Ok(out)
}
