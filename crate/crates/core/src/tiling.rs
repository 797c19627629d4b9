//! Sliding-window inference over whole volumes.
//!
//! Per axis, a volume of extent `E` is covered by `max(floor(E/W) + n, ceil(E/W))`
//! windows of size `W` (capped at `E - W + 1` distinct positions), placed at
//! `round(i * (E - W) / (count - 1))` so the first and last windows touch the
//! volume boundaries.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::net::ResDsn;
use crate::tensor::Tensor;
use crate::volume::{CtVolume, LabelVolume, ProbabilityVolume, Volume};

/// Number of windows along one axis.
pub fn window_count(extent: usize, window: usize, n: usize) -> usize {
    if extent <= window {
        return 1;
    }
    let formula = extent / window + n;
    formula.max(extent.div_ceil(window)).min(extent - window + 1)
}

/// Window origins along one axis, evenly spaced from `0` to `extent - window`
/// and rounded half up. Extents below the window yield `[0]`; the caller
/// pads the volume first.
pub fn plan_windows(extent: usize, window: usize, n: usize) -> Vec<usize> {
    let count = window_count(extent, window, n);
    if count == 1 {
        return vec![0];
    }
    let span = extent - window;
    let steps = count - 1;
    (0..count).map(|i| (2 * i * span + steps) / (2 * steps)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Mean of the overlapping window probabilities.
    #[default]
    Average,
    /// Fraction of overlapping windows that predict foreground at 0.5.
    Vote,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingPlan {
    /// Window origins along `x`, `y`, `z`.
    pub origins: [Vec<usize>; 3],
    pub window: [usize; 3],
    pub overlap: usize,
}

impl TilingPlan {
    pub fn new(dims: [usize; 3], window: [usize; 3], overlap: usize) -> Self {
        TilingPlan {
            origins: [0, 1, 2].map(|a| plan_windows(dims[a], window[a], overlap)),
            window,
            overlap,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.origins[a].len())
    }

    pub fn total(&self) -> usize {
        self.counts().iter().product()
    }

    /// Every window origin, `x` fastest.
    pub fn windows(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.total());
        for &z in &self.origins[2] {
            for &y in &self.origins[1] {
                for &x in &self.origins[0] {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }
}

/// Anything that maps a batch of windows `[n, 1, d, h, w]` to foreground
/// probabilities of the same spatial shape.
pub trait WindowPredictor: Sync {
    /// Window extent `(x, y, z)`.
    fn window(&self) -> [usize; 3];
    fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl WindowPredictor for ResDsn<f32> {
    fn window(&self) -> [usize; 3] {
        self.config().input_size
    }

    fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict_prob(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferOptions {
    pub overlap: usize,
    pub fusion: FusionMode,
    /// Windows per forward pass.
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub windows_per_axis: [usize; 3],
    pub total_windows: usize,
    pub overlap: usize,
    pub fusion: FusionMode,
    pub wall_time_ms: f64,
}

/// Tiles `vol`, predicts every window and fuses the overlaps. Sums are
/// committed in window order, so the result does not depend on thread
/// count.
pub fn infer_volume(
    model: &impl WindowPredictor,
    vol: &CtVolume,
    opts: &InferOptions,
) -> Result<(ProbabilityVolume, InferenceReport)> {
    if opts.batch == 0 {
        return Err(invalid_arg!("inference batch must be positive"));
    }
    let start = Instant::now();
    let win = model.window();
    let (padded, offset) = vol.pad_to_min(win, 0.0);
    let dims = padded.dims();
    let plan = TilingPlan::new(dims, win, opts.overlap);
    let windows = plan.windows();
    let mut sum = vec![0.0f64; padded.len()];
    let mut visits = vec![0u32; padded.len()];
    for chunk in windows.chunks(opts.batch) {
        let mut data = Vec::with_capacity(chunk.len() * win.iter().product::<usize>());
        for &o in chunk {
            data.extend_from_slice(padded.extract(o, win)?.data());
        }
        let x = Tensor::from_vec(&[chunk.len(), 1, win[2], win[1], win[0]], data)?;
        let p = model.predict(&x)?;
        p.expect_shape(x.shape())?;
        let plane = win.iter().product::<usize>();
        for (k, &o) in chunk.iter().enumerate() {
            let probs = &p.data()[k * plane..(k + 1) * plane];
            let mut i = 0;
            for z in 0..win[2] {
                for y in 0..win[1] {
                    let row = padded.index(o[0], o[1] + y, o[2] + z);
                    for x in 0..win[0] {
                        let v = probs[i] as f64;
                        sum[row + x] += match opts.fusion {
                            FusionMode::Average => v,
                            FusionMode::Vote => (v > 0.5) as u8 as f64,
                        };
                        visits[row + x] += 1;
                        i += 1;
                    }
                }
            }
        }
    }
    let fused: Vec<f32> = sum
        .iter()
        .zip(&visits)
        .map(|(&s, &c)| {
            debug_assert!(c > 0);
            (s / c as f64) as f32
        })
        .collect();
    let out = padded.with_data(fused)?.extract(offset, vol.dims())?;
    let report = InferenceReport {
        windows_per_axis: plan.counts(),
        total_windows: plan.total(),
        overlap: opts.overlap,
        fusion: opts.fusion,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((out, report))
}

/// Foreground where `p > tau`.
pub fn binarize(prob: &ProbabilityVolume, tau: f32) -> LabelVolume {
    prob.map(|p| (p > tau) as u8)
}

/// Voxel visit counts of a plan, for coverage checks.
pub fn coverage(dims: [usize; 3], plan: &TilingPlan) -> Result<Volume<u32>> {
    let mut v = Volume::filled(dims, [1.0; 3], 0u32)?;
    for o in plan.windows() {
        for z in o[2]..o[2] + plan.window[2] {
            for y in o[1]..o[1] + plan.window[1] {
                for x in o[0]..o[0] + plan.window[0] {
                    let i = v.index(x, y, z);
                    v.data_mut()[i] += 1;
                }
            }
        }
    }
    Ok(v)
}
