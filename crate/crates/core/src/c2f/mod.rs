//! Two-stage inference: a sparse coarse pass finds the organ, a dense fine
//! pass refines inside its padded bounding box.

mod bbox;

pub use bbox::{bbox_of_mask, BoundingBox};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::metrics::{filter_small_components, Connectivity};
use crate::tiling::{binarize, infer_volume, FusionMode, InferOptions, InferenceReport, WindowPredictor};
use crate::volume::{CtVolume, LabelVolume};

/// Where the fine-stage input was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    /// Padded and clamped box that was cropped.
    pub bbox: BoundingBox,
    /// Dimensions of the uncropped volume.
    pub dims: [usize; 3],
    /// Set when the coarse mask was empty and the whole volume was used.
    pub fallback: bool,
}

/// Crops `x` to the bounding box of `p` grown by `margin`. With
/// `mask_input` voxels outside `p` are zeroed first. An empty `p` yields
/// the whole volume.
pub fn crop_with_margin(x: &CtVolume, p: &LabelVolume, margin: usize, mask_input: bool) -> Result<(CtVolume, CropRecord)> {
    x.same_dims(p)?;
    let dims = x.dims();
    let (bbox, fallback) = match bbox_of_mask(p) {
        Some(b) => (b.padded(margin, dims), false),
        None => (BoundingBox::whole(dims), true),
    };
    let src = if mask_input {
        let data = x.data().iter().zip(p.data()).map(|(&v, &m)| if m != 0 { v } else { 0.0 }).collect();
        x.with_data(data)?
    } else {
        x.clone()
    };
    let crop = src.extract(bbox.lo, bbox.extent())?;
    Ok((crop, CropRecord { bbox, dims, fallback }))
}

/// `p_c` outside the recorded box, `p_f` inside it.
pub fn decrop(p_f: &LabelVolume, p_c: &LabelVolume, rec: &CropRecord) -> Result<LabelVolume> {
    if p_f.dims() != rec.bbox.extent() {
        return Err(shape_err!("fine mask {:?} does not match crop extent {:?}", p_f.dims(), rec.bbox.extent()));
    }
    if p_c.dims() != rec.dims {
        return Err(shape_err!("coarse mask {:?} does not match recorded dims {:?}", p_c.dims(), rec.dims));
    }
    let mut out = p_c.clone();
    out.paste(rec.bbox.lo, p_f)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C2fOptions {
    pub coarse_overlap: usize,
    pub fine_overlap: usize,
    pub margin: usize,
    pub fusion: FusionMode,
    pub filter_fraction: f64,
    pub connectivity: Connectivity,
    pub mask_input: bool,
    pub batch: usize,
}

impl Default for C2fOptions {
    fn default() -> Self {
        C2fOptions {
            coarse_overlap: 6,
            fine_overlap: 12,
            margin: 8,
            fusion: FusionMode::Average,
            filter_fraction: 0.2,
            connectivity: Connectivity::TwentySix,
            mask_input: false,
            batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub coarse: InferenceReport,
    pub fine: InferenceReport,
    pub crop: CropRecord,
    pub margin: usize,
    pub fusion: FusionMode,
    pub filter_fraction: f64,
    pub connectivity: Connectivity,
    /// Small-component filtering runs after both stages.
    pub filter_stages: Vec<String>,
    pub mask_input: bool,
    pub wall_time_ms: f64,
}

/// Tiled inference, thresholding at 0.5 and small-component filtering.
pub fn segment(
    model: &impl WindowPredictor,
    vol: &CtVolume,
    overlap: usize,
    fusion: FusionMode,
    batch: usize,
    filter_fraction: f64,
    connectivity: Connectivity,
) -> Result<(LabelVolume, InferenceReport)> {
    let opts = InferOptions { overlap, fusion, batch };
    let (prob, report) = infer_volume(model, vol, &opts)?;
    let mask = filter_small_components(&binarize(&prob, 0.5), filter_fraction, connectivity)?;
    Ok((mask, report))
}

pub fn run_c2f(
    coarse: &impl WindowPredictor,
    fine: &impl WindowPredictor,
    vol: &CtVolume,
    opts: &C2fOptions,
) -> Result<(LabelVolume, PipelineReport)> {
    let start = Instant::now();
    let (p_c, coarse_report) = segment(
        coarse,
        vol,
        opts.coarse_overlap,
        opts.fusion,
        opts.batch,
        opts.filter_fraction,
        opts.connectivity,
    )?;
    let (x_f, crop) = crop_with_margin(vol, &p_c, opts.margin, opts.mask_input)?;
    if crop.fallback {
        log::warn!("coarse prediction is empty; running the fine stage on the whole volume");
    }
    let (prob_f, fine_report) = infer_volume(
        fine,
        &x_f,
        &InferOptions {
            overlap: opts.fine_overlap,
            fusion: opts.fusion,
            batch: opts.batch,
        },
    )?;
    let merged = decrop(&binarize(&prob_f, 0.5), &p_c, &crop)?;
    let out = filter_small_components(&merged, opts.filter_fraction, opts.connectivity)?;
    let report = PipelineReport {
        coarse: coarse_report,
        fine: fine_report,
        crop,
        margin: opts.margin,
        fusion: opts.fusion,
        filter_fraction: opts.filter_fraction,
        connectivity: opts.connectivity,
        filter_stages: vec!["coarse".into(), "c2f".into()],
        mask_input: opts.mask_input,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;

    fn cube_mask(dims: [usize; 3], lo: usize, hi: usize) -> LabelVolume {
        let mut m = Volume::filled(dims, [1.0; 3], 0u8).unwrap();
        for z in lo..=hi {
            for y in lo..=hi {
                for x in lo..=hi {
                    m.set(x, y, z, 1);
                }
            }
        }
        m
    }

    #[test]
    fn crop_extent_and_masking() {
        let x = Volume::filled([64; 3], [1.0; 3], 3.0f32).unwrap();
        let mut p = cube_mask([64; 3], 10, 20);
        p.set(15, 15, 15, 0);
        let (c, rec) = crop_with_margin(&x, &p, 2, false).unwrap();
        assert_eq!(c.dims(), [15; 3]);
        assert_eq!(rec.bbox, BoundingBox::new([8; 3], [22; 3]).unwrap());
        assert!(c.data().iter().all(|&v| v == 3.0));
        let (m, _) = crop_with_margin(&x, &p, 2, true).unwrap();
        assert_eq!(m.get(7, 7, 7), 0.0);
        assert_eq!(m.get(0, 0, 0), 0.0);
        assert_eq!(m.get(2, 2, 2), 3.0);
    }

    #[test]
    fn margin_clamps_at_border() {
        let x = Volume::filled([32; 3], [1.0; 3], 0.0f32).unwrap();
        let p = cube_mask([32; 3], 0, 3);
        let (_, rec) = crop_with_margin(&x, &p, 5, false).unwrap();
        assert_eq!(rec.bbox.lo, [0; 3]);
        assert_eq!(rec.bbox.hi, [8; 3]);
    }

    #[test]
    fn empty_mask_falls_back_to_whole_volume() {
        let x = Volume::filled([8, 9, 10], [1.0; 3], 1.0f32).unwrap();
        let p = Volume::filled([8, 9, 10], [1.0; 3], 0u8).unwrap();
        let (c, rec) = crop_with_margin(&x, &p, 4, false).unwrap();
        assert!(rec.fallback);
        assert_eq!(c.dims(), [8, 9, 10]);
    }

    #[test]
    fn decrop_replaces_inside_only() {
        let p_c = cube_mask([16; 3], 4, 9);
        let rec = CropRecord {
            bbox: BoundingBox::new([2; 3], [11; 3]).unwrap(),
            dims: [16; 3],
            fallback: false,
        };
        let zero = Volume::filled([10; 3], [1.0; 3], 0u8).unwrap();
        let out = decrop(&zero, &p_c, &rec).unwrap();
        assert_eq!(out.count(), 0);
        let wrong = Volume::filled([9; 3], [1.0; 3], 0u8).unwrap();
        assert!(decrop(&wrong, &p_c, &rec).is_err());
    }
}
