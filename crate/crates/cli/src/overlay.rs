//! Mid-slice overlay images for eyeballing predictions.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use resdsn::{CtVolume, LabelVolume};

/// Axial slice through the middle of `image`: grey intensities, prediction
/// in red, ground truth in green, overlap in yellow.
pub fn write_mid_slice(image: &CtVolume, pred: &LabelVolume, truth: Option<&LabelVolume>, path: &Path) -> Result<()> {
    let [w, h, d] = image.dims();
    let z = d / 2;
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(f32::EPSILON);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = (255.0 * (image.get(x, y, z) - lo) / span) as u8 / 2;
            let p = pred.get(x, y, z) != 0;
            let t = truth.is_some_and(|t| t.get(x, y, z) != 0);
            let px = match (p, t) {
                (true, true) => Rgb([255, 255, g]),
                (true, false) => Rgb([255, g, g]),
                (false, true) => Rgb([g, 255, g]),
                (false, false) => Rgb([g, g, g]),
            };
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
