//! Patch samplers for the two training stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::c2f::{bbox_of_mask, BoundingBox};
use crate::error::{Error, Result};
use crate::volume::{CtVolume, LabelVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Coarse,
    Fine,
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageKind::Coarse => "coarse",
            StageKind::Fine => "fine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub stage: StageKind,
    /// Patch extent `(x, y, z)`; equals the network input size.
    pub patch_size: [usize; 3],
    pub fine_margin: usize,
}

pub type Patch = (CtVolume, LabelVolume);

/// Zero-pads both volumes symmetrically up to the patch size.
fn pad_pair(vol: &CtVolume, lab: &LabelVolume, patch: [usize; 3]) -> Result<(CtVolume, LabelVolume, [usize; 3])> {
    vol.same_dims(lab)?;
    let (v, off) = vol.pad_to_min(patch, 0.0);
    let (l, _) = lab.pad_to_min(patch, 0);
    Ok((v, l, off))
}

fn cut(vol: &CtVolume, lab: &LabelVolume, origin: [usize; 3], patch: [usize; 3]) -> Result<Patch> {
    Ok((vol.extract(origin, patch)?, lab.extract(origin, patch)?))
}

/// Uniform origin over every position that keeps the patch inside the
/// (padded) volume.
pub fn sample_coarse(vol: &CtVolume, lab: &LabelVolume, patch: [usize; 3], rng: &mut impl Rng) -> Result<Patch> {
    let (v, l, _) = pad_pair(vol, lab, patch)?;
    let dims = v.dims();
    let origin = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - patch[a]));
    cut(&v, &l, origin, patch)
}

/// Inclusive per-axis origin ranges for fine-stage patches around `region`
/// (the padded label box) in a volume of `dims`. Where the region is at
/// least a patch wide the patch stays inside it; where it is narrower the
/// patch must contain it.
pub fn fine_origin_ranges(region: &BoundingBox, dims: [usize; 3], patch: [usize; 3]) -> [(usize, usize); 3] {
    [0, 1, 2].map(|a| {
        let (lo, hi, p) = (region.lo[a], region.hi[a], patch[a]);
        if hi + 1 - lo >= p {
            (lo, hi + 1 - p)
        } else {
            ((hi + 1).saturating_sub(p), lo.min(dims[a] - p))
        }
    })
}

/// Uniform origin among patches tied to the label's bounding box grown by
/// `margin` (see [`fine_origin_ranges`]).
pub fn sample_fine(
    vol: &CtVolume,
    lab: &LabelVolume,
    patch: [usize; 3],
    margin: usize,
    rng: &mut impl Rng,
) -> Result<Patch> {
    let (v, l, _) = pad_pair(vol, lab, patch)?;
    let region = bbox_of_mask(&l).ok_or(Error::EmptyLabel)?.padded(margin, l.dims());
    let ranges = fine_origin_ranges(&region, l.dims(), patch);
    let origin = ranges.map(|(lo, hi)| rng.random_range(lo..=hi));
    cut(&v, &l, origin, patch)
}

pub fn sample(spec: &SamplerSpec, vol: &CtVolume, lab: &LabelVolume, rng: &mut impl Rng) -> Result<Patch> {
    match spec.stage {
        StageKind::Coarse => sample_coarse(vol, lab, spec.patch_size, rng),
        StageKind::Fine => sample_fine(vol, lab, spec.patch_size, spec.fine_margin, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;

    #[test]
    fn narrow_region_is_contained() {
        let region = BoundingBox::new([46; 3], [81; 3]).unwrap();
        let r = fine_origin_ranges(&region, [128; 3], [64; 3]);
        assert_eq!(r, [(18, 46); 3]);
        let wide = BoundingBox::new([10; 3], [100; 3]).unwrap();
        assert_eq!(fine_origin_ranges(&wide, [128; 3], [64; 3]), [(10, 37); 3]);
    }

    #[test]
    fn small_volume_is_padded() {
        let v = Volume::filled([10, 20, 30], [1.0; 3], 1.0f32).unwrap();
        let l = Volume::filled([10, 20, 30], [1.0; 3], 1u8).unwrap();
        let mut rng = crate::rng::stream(0, crate::rng::Purpose::Sample, 0, 0);
        let (p, q) = sample_coarse(&v, &l, [16; 3], &mut rng).unwrap();
        assert_eq!(p.dims(), [16; 3]);
        assert_eq!(q.dims(), [16; 3]);
        // three zero columns on each side of the x axis
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert_eq!(p.get(3, 0, 0), 1.0);
        assert_eq!(p.get(12, 0, 0), 1.0);
        assert_eq!(p.get(13, 0, 0), 0.0);
    }

    #[test]
    fn fine_sampling_needs_foreground() {
        let v = Volume::filled([16; 3], [1.0; 3], 0.0f32).unwrap();
        let l = Volume::filled([16; 3], [1.0; 3], 0u8).unwrap();
        let mut rng = crate::rng::stream(0, crate::rng::Purpose::Sample, 0, 0);
        assert!(matches!(sample_fine(&v, &l, [8; 3], 2, &mut rng), Err(Error::EmptyLabel)));
    }
}
