//! Right-angle rotations and axis flips applied identically to a patch and
//! its label.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentOp {
    pub axis: Axis,
    /// Rotation in multiples of 90 degrees, `0..4`.
    pub quarter_turns: u8,
    /// Flips along `x`, `y`, `z`, applied after the rotation.
    pub flips: [bool; 3],
}

impl AugmentOp {
    pub const IDENTITY: AugmentOp = AugmentOp {
        axis: Axis::Z,
        quarter_turns: 0,
        flips: [false; 3],
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let axis = [Axis::X, Axis::Y, Axis::Z][rng.random_range(0..3)];
        let quarter_turns = rng.random_range(0..4u8);
        let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        AugmentOp {
            axis,
            quarter_turns,
            flips,
        }
    }

    /// Source coordinate of output voxel `p` for one quarter turn in the
    /// plane `(u, v)`: `out[u, v] = in[n - 1 - v, u]`.
    fn turn_source(p: [usize; 3], plane: (usize, usize), n: usize) -> [usize; 3] {
        let (u, v) = plane;
        let mut s = p;
        s[u] = n - 1 - p[v];
        s[v] = p[u];
        s
    }

    pub fn apply<T: Copy>(&self, vol: &Volume<T>) -> Result<Volume<T>> {
        let dims = vol.dims();
        let turns = self.quarter_turns % 4;
        let plane = match self.axis {
            Axis::X => (1, 2),
            Axis::Y => (2, 0),
            Axis::Z => (0, 1),
        };
        if turns != 0 && dims[plane.0] != dims[plane.1] {
            return Err(invalid_arg!("rotation needs a square cross-section, got {:?}", dims));
        }
        let n = dims[plane.0];
        let mut out = Vec::with_capacity(vol.len());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut s = [x, y, z];
                    for a in 0..3 {
                        if self.flips[a] {
                            s[a] = dims[a] - 1 - s[a];
                        }
                    }
                    for _ in 0..turns {
                        s = Self::turn_source(s, plane, n);
                    }
                    out.push(vol.get(s[0], s[1], s[2]));
                }
            }
        }
        vol.with_data(out)
    }
}

/// Draws one op and applies it to both volumes.
pub fn augment<A: Copy, B: Copy>(
    image: &Volume<A>,
    label: &Volume<B>,
    rng: &mut impl Rng,
) -> Result<(Volume<A>, Volume<B>, AugmentOp)> {
    image.same_dims(label)?;
    let op = AugmentOp::sample(rng);
    Ok((op.apply(image)?, op.apply(label)?, op))
}
