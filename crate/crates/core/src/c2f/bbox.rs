use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::volume::LabelVolume;

/// Axis-aligned box with inclusive `(lo, hi)` voxel bounds per axis `x, y, z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Err(invalid_arg!("box lower corner {lo:?} exceeds upper corner {hi:?}"));
        }
        Ok(BoundingBox { lo, hi })
    }

    pub fn whole(dims: [usize; 3]) -> Self {
        BoundingBox {
            lo: [0; 3],
            hi: dims.map(|d| d - 1),
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn fits_in(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.hi[a] < dims[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    /// Grows by `margin` on every side, clamped to `[0, dims)`.
    pub fn padded(&self, margin: usize, dims: [usize; 3]) -> Self {
        BoundingBox {
            lo: self.lo.map(|l| l.saturating_sub(margin)),
            hi: [0, 1, 2].map(|a| (self.hi[a] + margin).min(dims[a] - 1)),
        }
    }

    /// Moves the box by `offset` voxels along each axis.
    pub fn shifted(&self, offset: [usize; 3]) -> Self {
        BoundingBox {
            lo: [0, 1, 2].map(|a| self.lo[a] + offset[a]),
            hi: [0, 1, 2].map(|a| self.hi[a] + offset[a]),
        }
    }
}

/// Tightest box around every foreground voxel, or `None` for an empty mask.
pub fn bbox_of_mask(mask: &LabelVolume) -> Option<BoundingBox> {
    let [w, h, _] = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        any = true;
        let p = [i % w, (i / w) % h, i / (w * h)];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    any.then_some(BoundingBox { lo, hi })
}
